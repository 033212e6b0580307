//! Idea generation: a tool-using agent loop that searches the literature,
//! reflects, and finalizes structured research proposals.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::gateway::{
    extract_fenced_blocks, Gateway, GatewayError, LiteratureResult, LiteratureSearch, Message, ModelRequest, Role,
};
use crate::prompts::{fill, IDEATION_INITIAL, IDEATION_REFLECTION, IDEATION_SYSTEM};

pub const SEARCH_ACTION: &str = "SearchSemanticScholar";
pub const FINALIZE_ACTION: &str = "FinalizeIdea";
const SEARCH_LIMIT: usize = 10;

const TOOL_DESCRIPTIONS: &str = "- SearchSemanticScholar: search the scholarly literature for papers related to a query. Returns titles, years, venues and abstract snippets.\n- FinalizeIdea: submit the final research proposal as the IDEA JSON.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Idea {
    #[serde(rename = "Name")]
    pub name: String,
    #[serde(rename = "Title")]
    pub title: String,
    #[serde(rename = "Short Hypothesis")]
    pub short_hypothesis: String,
    #[serde(rename = "Related Work")]
    pub related_work: String,
    #[serde(rename = "Abstract")]
    pub abstract_text: String,
    #[serde(rename = "Experiments")]
    pub experiments: String,
    #[serde(rename = "Risk Factors and Limitations")]
    pub risk_factors_and_limitations: String,
}

impl Idea {
    pub fn fields(&self) -> [(&'static str, &str); 7] {
        [
            ("Name", &self.name),
            ("Title", &self.title),
            ("Short Hypothesis", &self.short_hypothesis),
            ("Related Work", &self.related_work),
            ("Abstract", &self.abstract_text),
            ("Experiments", &self.experiments),
            ("Risk Factors and Limitations", &self.risk_factors_and_limitations),
        ]
    }

    pub fn validate(&self) -> Result<(), IdeationError> {
        for (field, value) in self.fields() {
            if value.trim().is_empty() {
                return Err(IdeationError::InvalidIdea(format!("field {field:?} is empty")));
            }
        }
        if self.name.contains(['/', '\\']) || self.name.trim() != self.name {
            return Err(IdeationError::InvalidIdea(format!("name {:?} is not a plain identifier", self.name)));
        }
        Ok(())
    }

    /// `Field: value` lines, as shown to downstream prompts.
    pub fn to_text(&self) -> String {
        self.fields().iter().map(|(k, v)| format!("{k}: {v}\n")).collect()
    }

    pub fn from_json(text: &str) -> Result<Self, IdeationError> {
        let idea: Idea = serde_json::from_str(text).map_err(|e| IdeationError::InvalidIdea(e.to_string()))?;
        idea.validate()?;
        Ok(idea)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", content = "arguments")]
pub enum AgentAction {
    SearchSemanticScholar { query: String },
    FinalizeIdea { idea: Idea },
}

#[derive(Debug, Error, PartialEq)]
pub enum IdeationError {
    #[error("completion is empty")]
    EmptyCompletion,
    #[error("no ACTION line found")]
    MissingAction,
    #[error("unknown action {0:?}")]
    UnknownAction(String),
    #[error("malformed arguments: {0}")]
    MalformedArguments(String),
    #[error("invalid idea: {0}")]
    InvalidIdea(String),
    #[error("slot {slot} spent {turns} turn(s) without an accepted FinalizeIdea")]
    IdeationExhausted { slot: usize, turns: usize },
    #[error("count must be at least 1")]
    ZeroCount,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Extracts the ACTION name and ARGUMENTS payload from a completion.
pub fn parse_action(completion: &str) -> Result<AgentAction, IdeationError> {
    if completion.trim().is_empty() {
        return Err(IdeationError::EmptyCompletion);
    }
    let lines: Vec<&str> = completion.lines().collect();
    let action_at = lines
        .iter()
        .position(|l| l.trim_start().starts_with("ACTION:"))
        .ok_or(IdeationError::MissingAction)?;
    let inline = lines[action_at].trim_start()["ACTION:".len()..].trim();
    let action = if inline.is_empty() {
        lines[action_at + 1..]
            .iter()
            .map(|l| l.trim())
            .find(|l| !l.is_empty())
            .ok_or(IdeationError::MissingAction)?
    } else {
        inline
    };
    let action = action.trim_matches(|c: char| c == '"' || c == '`' || c == '*');
    if action != SEARCH_ACTION && action != FINALIZE_ACTION {
        return Err(IdeationError::UnknownAction(action.to_string()));
    }
    let args_at = lines
        .iter()
        .position(|l| l.trim_start().starts_with("ARGUMENTS:"))
        .ok_or_else(|| IdeationError::MalformedArguments("no ARGUMENTS section".into()))?;
    let mut rest = lines[args_at].trim_start()["ARGUMENTS:".len()..].to_string();
    for l in &lines[args_at + 1..] {
        rest.push('\n');
        rest.push_str(l);
    }
    let payload = match extract_fenced_blocks(&rest).into_iter().next() {
        Some(block) => block.body,
        None => rest.trim().to_string(),
    };
    let value: Value = serde_json::from_str(payload.trim()).map_err(|e| IdeationError::MalformedArguments(e.to_string()))?;
    if action == SEARCH_ACTION {
        let query = value
            .get("query")
            .and_then(Value::as_str)
            .map(str::trim)
            .filter(|q| !q.is_empty())
            .ok_or_else(|| IdeationError::MalformedArguments("expected {\"query\": \"...\"}".into()))?;
        Ok(AgentAction::SearchSemanticScholar { query: query.to_string() })
    } else {
        let idea_value = value
            .get("idea")
            .cloned()
            .ok_or_else(|| IdeationError::MalformedArguments("expected {\"idea\": {...}}".into()))?;
        let idea: Idea =
            serde_json::from_value(idea_value).map_err(|e| IdeationError::MalformedArguments(e.to_string()))?;
        idea.validate()?;
        Ok(AgentAction::FinalizeIdea { idea })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub turn: usize,
    /// Parsed action name, or `invalid` when parsing failed.
    pub action: String,
    pub accepted: bool,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotTranscript {
    pub slot: usize,
    pub messages: Vec<Message>,
    pub actions: Vec<ActionRecord>,
    pub idea: Option<String>,
}

impl SlotTranscript {
    /// True when some search precedes the accepted finalize action.
    pub fn searched_before_finalize(&self) -> bool {
        let Some(final_turn) = self.actions.iter().position(|a| a.action == FINALIZE_ACTION && a.accepted) else {
            return false;
        };
        self.actions[..final_turn].iter().any(|a| a.action == SEARCH_ACTION && a.accepted)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdeationReport {
    pub ideas: Vec<Idea>,
    pub transcripts: Vec<SlotTranscript>,
    /// Slots that ended without an idea, with the reason.
    pub skipped: Vec<(usize, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdeationConfig {
    pub count: usize,
    pub reflection_rounds: usize,
    pub seed: u64,
}

impl Default for IdeationConfig {
    fn default() -> Self {
        IdeationConfig {
            count: 1,
            reflection_rounds: 3,
            seed: 0,
        }
    }
}

fn format_results(query: &str, results: &[LiteratureResult]) -> String {
    if results.is_empty() {
        return format!("Literature search results for {query:?}: no papers found.");
    }
    let mut out = format!("Literature search results for {query:?}:\n");
    for (i, r) in results.iter().enumerate() {
        let year = r.year.map(|y| y.to_string()).unwrap_or_else(|| "n.d.".into());
        out.push_str(&format!(
            "{}. {} ({year}, {}) [{}]\n   {}\n",
            i + 1,
            r.title,
            if r.venue.is_empty() { "unknown venue" } else { &r.venue },
            r.external_id,
            r.abstract_snippet
        ));
    }
    out
}

fn unique_name(name: &str, used: &BTreeSet<String>) -> String {
    if !used.contains(name) {
        return name.to_string();
    }
    (2..)
        .map(|i| format!("{name}-{i}"))
        .find(|candidate| !used.contains(candidate))
        .expect("some suffix is free")
}

/// Runs `config.count` idea slots in order. Each slot is an agent loop of
/// at most `1 + reflection_rounds` model turns; previously accepted ideas
/// are fed into later slots. A FinalizeIdea before any successful search is
/// rejected and the model reprompted.
pub fn generate_ideas(
    topic_description: &str,
    config: &IdeationConfig,
    gateway: &Gateway,
    literature: &dyn LiteratureSearch,
) -> Result<IdeationReport, IdeationError> {
    if config.count == 0 {
        return Err(IdeationError::ZeroCount);
    }
    let system = fill(
        IDEATION_SYSTEM,
        &[
            ("tool_descriptions", TOOL_DESCRIPTIONS),
            ("tool_names_str", &format!("{SEARCH_ACTION}, {FINALIZE_ACTION}")),
        ],
    );
    let mut ideas: Vec<Idea> = Vec::new();
    let mut used_names = BTreeSet::new();
    let mut transcripts = Vec::new();
    let mut skipped = Vec::new();
    let max_turns = 1 + config.reflection_rounds;
    for slot in 0..config.count {
        let previous = if ideas.is_empty() {
            "(none yet)".to_string()
        } else {
            ideas
                .iter()
                .map(|i| serde_json::to_string_pretty(i).expect("idea serializes"))
                .collect::<Vec<_>>()
                .join("\n\n")
        };
        let mut messages = vec![
            Message::system(system.clone()),
            Message::user(fill(
                IDEATION_INITIAL,
                &[("workshop_description", topic_description.trim()), ("prev_ideas_string", &previous)],
            )),
        ];
        let mut actions = Vec::new();
        let mut searches = 0usize;
        let mut accepted: Option<Idea> = None;
        for turn in 1..=max_turns {
            let request = ModelRequest::new(Role::Ideation, messages.clone()).seeded(config.seed + slot as u64);
            let reply = gateway.complete(&request)?;
            messages.push(Message::assistant(reply.text.clone()));
            let tool_result = match parse_action(&reply.text) {
                Ok(AgentAction::SearchSemanticScholar { query }) => match literature.search(&query, SEARCH_LIMIT) {
                    Ok(results) => {
                        searches += 1;
                        actions.push(ActionRecord {
                            turn,
                            action: SEARCH_ACTION.into(),
                            accepted: true,
                            note: format!("{} result(s) for {query:?}", results.len()),
                        });
                        format_results(&query, &results)
                    }
                    Err(e) => {
                        actions.push(ActionRecord {
                            turn,
                            action: SEARCH_ACTION.into(),
                            accepted: false,
                            note: e.to_string(),
                        });
                        format!("The literature search failed: {e}")
                    }
                },
                Ok(AgentAction::FinalizeIdea { .. }) if searches == 0 => {
                    actions.push(ActionRecord {
                        turn,
                        action: FINALIZE_ACTION.into(),
                        accepted: false,
                        note: "rejected: no literature search yet".into(),
                    });
                    format!(
                        "FinalizeIdea was rejected: you must perform at least one literature search with {SEARCH_ACTION} before finalizing your idea."
                    )
                }
                Ok(AgentAction::FinalizeIdea { mut idea }) => {
                    idea.name = unique_name(&idea.name, &used_names);
                    actions.push(ActionRecord {
                        turn,
                        action: FINALIZE_ACTION.into(),
                        accepted: true,
                        note: format!("accepted as {}", idea.name),
                    });
                    accepted = Some(idea);
                    break;
                }
                Err(e) => {
                    actions.push(ActionRecord {
                        turn,
                        action: "invalid".into(),
                        accepted: false,
                        note: e.to_string(),
                    });
                    format!("Your response could not be used ({e}). Respond with ACTION: and ARGUMENTS: exactly as specified.")
                }
            };
            if turn < max_turns {
                messages.push(Message::user(fill(
                    IDEATION_REFLECTION,
                    &[
                        ("current_round", &turn.to_string()),
                        ("num_reflections", &config.reflection_rounds.to_string()),
                        ("last_tool_results", &tool_result),
                    ],
                )));
            }
        }
        match &accepted {
            Some(idea) => {
                used_names.insert(idea.name.clone());
                ideas.push(idea.clone());
            }
            None => {
                let err = IdeationError::IdeationExhausted { slot, turns: max_turns };
                log::warn!("{err}");
                skipped.push((slot, err.to_string()));
            }
        }
        transcripts.push(SlotTranscript {
            slot,
            messages,
            actions,
            idea: accepted.map(|i| i.name),
        });
    }
    Ok(IdeationReport {
        ideas,
        transcripts,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::FixtureLiterature;

    const IDEA: &str = r#"{"idea": {"Name": "n", "Title": "t", "Short Hypothesis": "h", "Related Work": "r", "Abstract": "a", "Experiments": "e", "Risk Factors and Limitations": "l"}}"#;

    #[test]
    fn parses_search_and_finalize() {
        let a = parse_action("ACTION:\nSearchSemanticScholar\nARGUMENTS:\n{\"query\":\"x\"}").unwrap();
        assert_eq!(a, AgentAction::SearchSemanticScholar { query: "x".into() });
        let f = parse_action(&format!("ACTION:\nFinalizeIdea\n\nARGUMENTS:\n```json\n{IDEA}\n```")).unwrap();
        assert!(matches!(f, AgentAction::FinalizeIdea { idea } if idea.name == "n"));
    }

    #[test]
    fn rejects_bad_actions() {
        assert_eq!(
            parse_action("ACTION:\nDeployRockets"),
            Err(IdeationError::UnknownAction("DeployRockets".into()))
        );
        assert!(matches!(
            parse_action("ACTION:\nSearchSemanticScholar\nARGUMENTS:\n{query: x}"),
            Err(IdeationError::MalformedArguments(_))
        ));
        assert!(matches!(
            parse_action("ACTION:\nFinalizeIdea\nARGUMENTS:\n{\"idea\": {\"Name\": \"n\"}}"),
            Err(IdeationError::MalformedArguments(_))
        ));
        assert_eq!(parse_action("   "), Err(IdeationError::EmptyCompletion));
    }

    #[test]
    fn mock_run_searches_then_finalizes_with_distinct_names() {
        let gw = Gateway::mock(5, Default::default());
        let cfg = IdeationConfig {
            count: 3,
            reflection_rounds: 3,
            seed: 1,
        };
        let report = generate_ideas("Topic: robustness of small models", &cfg, &gw, &FixtureLiterature::synthetic()).unwrap();
        assert_eq!(report.ideas.len(), 3);
        let names: BTreeSet<_> = report.ideas.iter().map(|i| i.name.clone()).collect();
        assert_eq!(names.len(), 3);
        assert!(report.transcripts.iter().all(SlotTranscript::searched_before_finalize));
        let again = generate_ideas("Topic: robustness of small models", &cfg, &gw, &FixtureLiterature::synthetic()).unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn duplicate_names_get_suffixes() {
        let used: BTreeSet<String> = ["a".to_string(), "a-2".to_string()].into();
        assert_eq!(unique_name("a", &used), "a-3");
        assert_eq!(unique_name("b", &used), "b");
    }
}
