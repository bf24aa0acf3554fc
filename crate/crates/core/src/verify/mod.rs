//! Multi-stage verification: cleanup, pair extraction, consistency against
//! the trajectory, and regeneration on failure.

mod consistency;
mod extract;
mod normalize;

use serde::{Deserialize, Serialize};

pub use consistency::{all_pairs, check_consistency, check_destination, ground_truth_pairs, NotGrounded};
pub use extract::{extract_lmm, extract_rule_based, parse_extraction_answer, sentence_spans, ExtractError};
pub use normalize::{normalize, CleanupRule, NonConvergent, Normalized, RuleError, RuleSet, MAX_PASSES};

use crate::gateway::{Corruption, Gateway, GatewayError};
use crate::lexicon::Vocabulary;
use crate::model::{
    CleanupEdit, ExtractorKind, Granularity, Instruction, ModelError, NodeActionPair, PairStatus,
    PathInstructionPair, Trajectory, Verdict, VerificationRecord,
};
use crate::prompt::{build_generation_prompt, PromptError, TemplateSet};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelMatch {
    /// Compare room types only; object lists are ignored.
    #[default]
    RoomTypeOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    pub max_attempts: u32,
    /// Tried in order; the next one runs only when the previous finds no
    /// pairs or returns an unparseable answer.
    pub extractor_order: Vec<ExtractorKind>,
    pub label_match: LabelMatch,
    /// When false the verdict is still recorded but never triggers
    /// regeneration, and every pair is emitted.
    pub consistency: bool,
    /// Also require the final room to close the instruction.
    pub require_destination: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            extractor_order: vec![ExtractorKind::Lmm, ExtractorKind::RuleBased],
            label_match: LabelMatch::RoomTypeOnly,
            consistency: true,
            require_destination: true,
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_attempts == 0 {
            return Err("max_attempts must be at least 1".into());
        }
        if self.extractor_order.is_empty() {
            return Err("extractor_order must name at least one extractor".into());
        }
        Ok(())
    }

    /// Whether a pair with this status belongs in the emitted dataset.
    pub fn emits(&self, status: PairStatus) -> bool {
        !self.consistency || status == PairStatus::Verified
    }
}

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error(transparent)]
    NotGrounded(#[from] NotGrounded),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("gateway failure during verification: {0}")]
    Gateway(#[from] GatewayError),
    #[error("cleanup: {0}")]
    NonConvergent(#[from] NonConvergent),
    #[error("every attempt returned an empty instruction ({attempts} attempts)")]
    EmptyCompletion { attempts: u32 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("verify config: {0}")]
    Config(String),
}

/// Shared read-only context for verification.
#[derive(Clone, Copy)]
pub struct Verifier<'a> {
    pub gateway: &'a Gateway,
    pub templates: &'a TemplateSet,
    pub rules: &'a RuleSet,
    pub vocab: &'a Vocabulary,
    pub config: &'a VerifyConfig,
}

/// What happened on one generation attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptTrace {
    pub attempt: u32,
    pub raw_text: String,
    pub text: String,
    pub edits: Vec<CleanupEdit>,
    pub corruptions: Vec<Corruption>,
    pub extracted: Vec<NodeActionPair>,
    pub extractor: ExtractorKind,
    pub verdict: Verdict,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub pair: PathInstructionPair,
    pub attempts: Vec<AttemptTrace>,
}

struct Judgement {
    extracted: Vec<NodeActionPair>,
    extractor: ExtractorKind,
    verdict: Verdict,
}

impl Verifier<'_> {
    fn extract(&self, text: &str, attempt: u32) -> Result<(Vec<NodeActionPair>, ExtractorKind), VerifyError> {
        let mut last = self.config.extractor_order[0];
        for &kind in &self.config.extractor_order {
            last = kind;
            let result = match kind {
                ExtractorKind::RuleBased => extract_rule_based(text, self.vocab),
                ExtractorKind::Lmm => extract_lmm(text, self.gateway, self.templates, self.vocab, attempt),
            };
            match result {
                Ok(pairs) => return Ok((pairs, kind)),
                Err(ExtractError::Gateway(e)) => return Err(e.into()),
                Err(ExtractError::Prompt(e)) => return Err(e.into()),
                Err(e) => log::debug!("{kind:?} extraction failed: {e}"),
            }
        }
        Ok((Vec::new(), last))
    }

    fn judge(&self, traj: &Trajectory, text: &str, attempt: u32) -> Result<Judgement, VerifyError> {
        if text.is_empty() {
            return Ok(Judgement {
                extracted: Vec::new(),
                extractor: self.config.extractor_order[0],
                verdict: Verdict::ExtractionFailure,
            });
        }
        let all = all_pairs(traj)?;
        let truth = &all[..all.len() - 1];
        let (extracted, extractor) = self.extract(text, attempt)?;
        if extracted.is_empty() {
            return Ok(Judgement {
                extracted,
                extractor,
                verdict: Verdict::ExtractionFailure,
            });
        }
        let mut verdict = check_consistency(&extracted, truth);
        if self.config.require_destination {
            let last = &all[all.len() - 1];
            if let Some(m) = check_destination(text, &last.room_type, all.len(), &self.vocab.rooms) {
                verdict = match verdict {
                    Verdict::Mismatch(mut ms) => {
                        if !ms.iter().any(|x| x.index == m.index) {
                            ms.push(m);
                        }
                        Verdict::Mismatch(ms)
                    }
                    _ => Verdict::Mismatch(vec![m]),
                };
            }
        }
        Ok(Judgement {
            extracted,
            extractor,
            verdict,
        })
    }

    /// Generates an instruction for `traj` and verifies it, regenerating up
    /// to `max_attempts` times. A `Rejected` pair is a normal outcome; errors
    /// are reserved for backend and configuration failures.
    pub fn generate_verified(&self, traj: &Trajectory, g: Granularity) -> Result<PathInstructionPair, VerifyError> {
        Ok(self.generate_traced(traj, g)?.pair)
    }

    pub fn generate_traced(&self, traj: &Trajectory, g: Granularity) -> Result<Outcome, VerifyError> {
        self.config.validate().map_err(VerifyError::Config)?;
        all_pairs(traj)?;
        let max_attempts = if self.config.consistency { self.config.max_attempts } else { 1 };
        let mut attempts: Vec<AttemptTrace> = Vec::new();
        let mut template_version = String::new();
        for attempt in 1..=max_attempts {
            let prompt = build_generation_prompt(traj, g, self.templates)?;
            template_version = prompt.template_version.clone();
            let completion = self.gateway.complete(&prompt, attempt)?;
            let normalized = normalize(&completion.text, self.rules)?;
            let judgement = self.judge(traj, &normalized.text, attempt)?;
            if !judgement.verdict.is_pass()
                && !completion.corruptions.is_empty()
                && completion.corruptions.iter().all(Corruption::is_noise)
            {
                log::warn!(
                    "{}: noise-only corruption was not neutralized on attempt {attempt}: {:?} -> {:?}",
                    traj.id(),
                    completion.text,
                    normalized.text
                );
            }
            let pass = judgement.verdict.is_pass();
            attempts.push(AttemptTrace {
                attempt,
                raw_text: completion.text,
                text: normalized.text,
                edits: normalized.edits,
                corruptions: completion.corruptions,
                extracted: judgement.extracted,
                extractor: judgement.extractor,
                verdict: judgement.verdict,
            });
            if pass {
                break;
            }
        }
        let last = attempts.last().expect("at least one attempt");
        let with_text = attempts
            .iter()
            .rev()
            .find(|a| !a.text.is_empty())
            .ok_or(VerifyError::EmptyCompletion {
                attempts: attempts.len() as u32,
            })?;
        let instruction = Instruction::new(
            with_text.text.clone(),
            g,
            self.gateway.model_id(),
            with_text.attempt,
            with_text.edits.clone(),
        )?;
        let status = if last.verdict.is_pass() {
            PairStatus::Verified
        } else {
            PairStatus::Rejected
        };
        let record = VerificationRecord {
            extracted: last.extracted.clone(),
            verdict: last.verdict.clone(),
            attempts_used: last.attempt,
            extractor: last.extractor,
            template_version,
        };
        let pair = PathInstructionPair::new(traj.clone(), instruction, record, status)?;
        Ok(Outcome { pair, attempts })
    }

    /// Re-runs cleanup, extraction and the consistency check on a stored
    /// pair's instruction without generating anything.
    pub fn reverify(&self, pair: &PathInstructionPair) -> Result<PathInstructionPair, VerifyError> {
        let inst = pair.instruction();
        let normalized = normalize(inst.text(), self.rules)?;
        let judgement = self.judge(pair.trajectory(), &normalized.text, inst.attempt())?;
        let mut edits = inst.cleanup_edits().to_vec();
        edits.extend(normalized.edits);
        let text = if normalized.text.is_empty() { inst.text().to_string() } else { normalized.text };
        let instruction = Instruction::new(text, inst.granularity(), inst.model_id(), inst.attempt(), edits)?;
        let status = if judgement.verdict.is_pass() {
            PairStatus::Verified
        } else {
            PairStatus::Rejected
        };
        let record = VerificationRecord {
            extracted: judgement.extracted,
            verdict: judgement.verdict,
            attempts_used: pair.verification().attempts_used,
            extractor: judgement.extractor,
            template_version: pair.verification().template_version.clone(),
        };
        Ok(PathInstructionPair::new(pair.trajectory().clone(), instruction, record, status)?)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::frames::NoImages;
    use crate::gateway::GatewayConfig;
    use crate::lexicon::RoomType;
    use crate::model::{Action, FrameRef, RoomBounds, RoomLabel, TrajectoryNode};

    fn traj(rooms: &[(&str, Action)]) -> Trajectory {
        let nodes = rooms
            .iter()
            .enumerate()
            .map(|(i, (room, action))| {
                let mut n = TrajectoryNode::room(FrameRef::new("v", i as u32 * 2, i as f64));
                n.label = Some(RoomLabel::new(RoomType::new_unchecked(*room), Vec::new(), 0.9).unwrap());
                n.action = Some(*action);
                n
            })
            .collect();
        Trajectory::new("v-000", "v", nodes, 0, RoomBounds::default()).unwrap()
    }

    struct Fixture {
        gateway: Gateway,
        templates: TemplateSet,
        rules: RuleSet,
        vocab: Vocabulary,
        config: VerifyConfig,
    }

    impl Fixture {
        fn new(cfg: GatewayConfig) -> Self {
            let vocab = Vocabulary::builtin();
            Self {
                gateway: Gateway::new(&cfg, &vocab, Arc::new(NoImages)).unwrap(),
                templates: TemplateSet::builtin(),
                rules: RuleSet::builtin(),
                vocab,
                config: VerifyConfig::default(),
            }
        }

        fn verifier(&self) -> Verifier<'_> {
            Verifier {
                gateway: &self.gateway,
                templates: &self.templates,
                rules: &self.rules,
                vocab: &self.vocab,
                config: &self.config,
            }
        }
    }

    #[test]
    fn ground_truth_drops_terminal_stop() {
        let t = traj(&[("kitchen", Action::TurnLeft), ("hallway", Action::Forward), ("office", Action::TurnRight), ("bedroom", Action::Stop)]);
        let gt = ground_truth_pairs(&t).unwrap();
        let got: Vec<(&str, Action)> = gt.iter().map(|p| (p.room_type.as_str(), p.action)).collect();
        assert_eq!(got, [("kitchen", Action::TurnLeft), ("hallway", Action::Forward), ("office", Action::TurnRight)]);
        let k2 = traj(&[("kitchen", Action::Forward), ("bedroom", Action::Stop)]);
        assert_eq!(ground_truth_pairs(&k2).unwrap().len(), 1);
    }

    #[test]
    fn faithful_verifies_first_time() {
        let f = Fixture::new(GatewayConfig::mock_faithful(1));
        let t = traj(&[("kitchen", Action::TurnLeft), ("hallway", Action::Forward), ("bedroom", Action::Stop)]);
        for g in Granularity::ALL {
            let pair = f.verifier().generate_verified(&t, g).unwrap();
            assert!(pair.is_verified());
            assert_eq!(pair.verification().attempts_used, 1);
            assert_eq!(pair.verification().extractor, ExtractorKind::Lmm);
        }
    }

    #[test]
    fn always_corrupted_is_rejected_after_max_attempts() {
        let f = Fixture::new(GatewayConfig::mock_lossy(4, 1.0, 0.0));
        let t = traj(&[("kitchen", Action::TurnLeft), ("hallway", Action::Forward), ("bedroom", Action::Stop)]);
        let out = f.verifier().generate_traced(&t, Granularity::Coarse).unwrap();
        assert_eq!(out.pair.status(), PairStatus::Rejected);
        assert_eq!(out.pair.verification().attempts_used, 3);
        assert_eq!(out.attempts.len(), 3);
        assert_eq!(f.gateway.stats().generation_calls, 3);
    }

    #[test]
    fn without_consistency_one_attempt_is_made() {
        let mut f = Fixture::new(GatewayConfig::mock_lossy(4, 1.0, 0.0));
        f.config.consistency = false;
        let t = traj(&[("kitchen", Action::TurnLeft), ("bedroom", Action::Stop)]);
        let pair = f.verifier().generate_verified(&t, Granularity::Coarse).unwrap();
        assert_eq!(pair.verification().attempts_used, 1);
        assert!(f.config.emits(pair.status()));
    }

    #[test]
    fn rule_fallback_when_lmm_finds_nothing() {
        let mut f = Fixture::new(GatewayConfig::mock_faithful(0));
        f.config.extractor_order = vec![ExtractorKind::Lmm, ExtractorKind::RuleBased];
        let t = traj(&[("dining room", Action::TurnLeft), ("family room", Action::Forward), ("living room", Action::Stop)]);
        let stored = f.verifier().generate_verified(&t, Granularity::Coarse).unwrap();
        let odd = Instruction::new(
            "The dining room: turn left. The family room: go straight. The living room: stop.",
            Granularity::Coarse,
            "human",
            1,
            vec![],
        )
        .unwrap();
        let edited = PathInstructionPair::new(t.clone(), odd, stored.verification().clone(), PairStatus::Rejected).unwrap();
        let re = f.verifier().reverify(&edited).unwrap();
        assert_eq!(re.verification().extractor, ExtractorKind::RuleBased);
        assert!(re.is_verified());
    }
}
