//! Generation and extraction prompts.
//!
//! Prompt wording lives in text templates with `{{placeholder}}` tokens. The
//! bundled set is compiled in; [`TemplateSet::load_dir`] reads an edited copy
//! from disk. Placeholders per template:
//!
//! | template                 | placeholders                                  |
//! |--------------------------|-----------------------------------------------|
//! | `generation_system.txt`  | `granularity_directive`, `format_example`     |
//! | `generation_user.txt`    | `triplets`                                    |
//! | `granularity_*.txt`      | none                                          |
//! | `extraction_system.txt`  | none                                          |
//! | `extraction_user.txt`    | `instruction`                                 |

use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::grounding::{triplet_view, Triplet};
use crate::lexicon::RoomType;
use crate::model::{Action, FrameRef, Granularity, RoomLabel, Trajectory};
use crate::render::{render_instruction, RenderStep};

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("trajectory is not grounded")]
    PreconditionViolated,
    #[error("instruction text is empty")]
    EmptyInstruction,
    #[error("template {name}: {source}")]
    Io {
        name: String,
        #[source]
        source: std::io::Error,
    },
    #[error("template {name}: unknown placeholder {{{{{placeholder}}}}}")]
    UnknownPlaceholder { name: String, placeholder: String },
    #[error("template {name}: missing placeholder {{{{{placeholder}}}}}")]
    MissingPlaceholder { name: String, placeholder: String },
}

/// A chat request: system and user text plus image attachments, referenced by
/// frame and resolved to bytes by the backend that needs them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub system_text: String,
    pub user_text: String,
    pub images: Vec<FrameRef>,
    pub template_id: String,
    pub template_version: String,
}

impl Prompt {
    /// Content hash over everything a backend sees.
    pub fn request_hash(&self) -> String {
        let mut h = Sha256::new();
        for part in [&self.template_id, &self.system_text, &self.user_text] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        for f in &self.images {
            h.update(f.key().as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }

    pub fn is_extraction(&self) -> bool {
        self.template_id == EXTRACTION_ID
    }

    /// Granularity named by a generation template id.
    pub fn granularity(&self) -> Option<Granularity> {
        self.template_id.strip_prefix("generation.")?.parse().ok()
    }
}

pub const EXTRACTION_ID: &str = "extraction";

const NAMES: [&str; 7] = [
    "generation_system",
    "generation_user",
    "granularity_coarse",
    "granularity_fine",
    "granularity_fine_env",
    "extraction_system",
    "extraction_user",
];

fn allowed(name: &str) -> &'static [&'static str] {
    match name {
        "generation_system" => &["granularity_directive", "format_example"],
        "generation_user" => &["triplets"],
        "extraction_user" => &["instruction"],
        _ => &[],
    }
}

static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{\{\s*(\w+)\s*\}\}").unwrap());

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    texts: [String; 7],
    version: String,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self::from_texts([
            include_str!("../assets/templates/generation_system.txt"),
            include_str!("../assets/templates/generation_user.txt"),
            include_str!("../assets/templates/granularity_coarse.txt"),
            include_str!("../assets/templates/granularity_fine.txt"),
            include_str!("../assets/templates/granularity_fine_env.txt"),
            include_str!("../assets/templates/extraction_system.txt"),
            include_str!("../assets/templates/extraction_user.txt"),
        ])
        .expect("bundled templates are valid")
    }

    /// Reads `<name>.txt` for every template name from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut texts: Vec<String> = Vec::with_capacity(NAMES.len());
        for name in NAMES {
            let path = dir.join(format!("{name}.txt"));
            let text = std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                name: name.to_string(),
                source,
            })?;
            texts.push(text);
        }
        let texts: [String; 7] = texts.try_into().expect("one text per name");
        Self::from_texts(texts.each_ref().map(String::as_str))
    }

    fn from_texts(texts: [&str; 7]) -> Result<Self, PromptError> {
        let texts = texts.map(str::trim_end);
        let mut h = Sha256::new();
        for (name, text) in NAMES.iter().zip(texts) {
            for cap in PLACEHOLDER.captures_iter(text) {
                if !allowed(name).contains(&&cap[1]) {
                    return Err(PromptError::UnknownPlaceholder {
                        name: name.to_string(),
                        placeholder: cap[1].to_string(),
                    });
                }
            }
            for want in allowed(name) {
                if !PLACEHOLDER.captures_iter(text).any(|c| &c[1] == *want) {
                    return Err(PromptError::MissingPlaceholder {
                        name: name.to_string(),
                        placeholder: want.to_string(),
                    });
                }
            }
            h.update(name.as_bytes());
            h.update([0]);
            h.update(text.as_bytes());
            h.update([0]);
        }
        Ok(Self {
            texts: texts.map(str::to_string),
            version: hex::encode(&h.finalize()[..8]),
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    fn get(&self, name: &str) -> &str {
        let i = NAMES.iter().position(|n| *n == name).expect("known template name");
        &self.texts[i]
    }

    fn directive(&self, g: Granularity) -> &str {
        match g {
            Granularity::Coarse => self.get("granularity_coarse"),
            Granularity::Fine { environment: false } => self.get("granularity_fine"),
            Granularity::Fine { environment: true } => self.get("granularity_fine_env"),
        }
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

fn fill(template: &str, values: &[(&str, &str)]) -> String {
    PLACEHOLDER
        .replace_all(template, |c: &regex::Captures<'_>| {
            values
                .iter()
                .find(|(k, _)| *k == &c[1])
                .map(|(_, v)| v.to_string())
                .unwrap_or_default()
        })
        .into_owned()
}

/// Fixed miniature trajectory behind the output-format example.
pub fn example_steps() -> Vec<RenderStep> {
    vec![
        RenderStep::new("living room", vec!["sofa".into(), "television".into()], Action::Forward),
        RenderStep::new("kitchen", vec!["stove".into()], Action::TurnLeft),
        RenderStep::new("bedroom", vec!["bed".into()], Action::Stop),
    ]
}

/// One line of the serialized triplet block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletLine {
    /// 1-based position, matching the attachment order.
    pub image: usize,
    pub room: Option<RoomType>,
    pub objects: Vec<String>,
    pub action: Option<Action>,
}

impl TripletLine {
    pub fn from_triplet(image: usize, t: &Triplet) -> Self {
        Self {
            image,
            room: t.label.as_ref().map(|l| l.room_type.clone()),
            objects: t.label.as_ref().map(|l| l.objects.clone()).unwrap_or_default(),
            action: t.action,
        }
    }

    pub fn is_room(&self) -> bool {
        self.room.is_some()
    }
}

fn format_triplet(image: usize, t: &Triplet) -> String {
    match (&t.label, t.action) {
        (Some(label), Some(action)) => format!("(image#{image}, {}, {action})", label.prompt_text()),
        _ => format!("(image#{image}, None, None)"),
    }
}

pub fn format_triplet_block(triplets: &[Triplet]) -> String {
    triplets
        .iter()
        .enumerate()
        .map(|(i, t)| format_triplet(i + 1, t))
        .collect::<Vec<_>>()
        .join("\n")
}

static TRIPLET_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\(image#(\d+), (.+), (\w+)\)$").unwrap());

/// Parses every triplet line in `text`, skipping anything else. Labels are
/// taken verbatim; no lexicon lookup happens here.
pub fn parse_triplet_block(text: &str) -> Vec<TripletLine> {
    text.lines()
        .filter_map(|line| {
            let c = TRIPLET_LINE.captures(line.trim())?;
            let image = c[1].parse().ok()?;
            if &c[2] == "None" && &c[3] == "None" {
                return Some(TripletLine {
                    image,
                    room: None,
                    objects: Vec::new(),
                    action: None,
                });
            }
            let action: Action = c[3].parse().ok()?;
            let (objects, room) = RoomLabel::split_prompt_text(&c[2]);
            Some(TripletLine {
                image,
                room: Some(RoomType::new_unchecked(room)),
                objects,
                action: Some(action),
            })
        })
        .collect()
}

/// Render steps for the room lines of a parsed block. `None` if the block is
/// not a well-formed grounded trajectory (fewer than two rooms, or an action
/// missing).
pub fn steps_from_lines(lines: &[TripletLine]) -> Option<Vec<RenderStep>> {
    let steps: Vec<RenderStep> = lines
        .iter()
        .filter(|l| l.is_room())
        .map(|l| Some(RenderStep::new(l.room.as_ref()?.as_str(), l.objects.clone(), l.action?)))
        .collect::<Option<_>>()?;
    (steps.len() >= 2).then_some(steps)
}

pub fn build_generation_prompt(traj: &Trajectory, g: Granularity, templates: &TemplateSet) -> Result<Prompt, PromptError> {
    let triplets = triplet_view(traj).map_err(|_| PromptError::PreconditionViolated)?;
    let example = render_instruction(&example_steps(), g);
    let system_text = fill(
        templates.get("generation_system"),
        &[("granularity_directive", templates.directive(g)), ("format_example", &example)],
    );
    let user_text = fill(templates.get("generation_user"), &[("triplets", &format_triplet_block(&triplets))]);
    Ok(Prompt {
        system_text,
        user_text,
        images: triplets.into_iter().map(|t| t.frame).collect(),
        template_id: format!("generation.{g}"),
        template_version: templates.version().to_string(),
    })
}

pub fn build_extraction_prompt(instruction: &str, templates: &TemplateSet) -> Result<Prompt, PromptError> {
    if instruction.trim().is_empty() {
        return Err(PromptError::EmptyInstruction);
    }
    Ok(Prompt {
        system_text: templates.get("extraction_system").to_string(),
        user_text: fill(templates.get("extraction_user"), &[("instruction", instruction)]),
        images: Vec::new(),
        template_id: EXTRACTION_ID.to_string(),
        template_version: templates.version().to_string(),
    })
}

/// Instruction embedded in an extraction prompt, between the `"""` fences.
pub fn embedded_instruction(prompt: &Prompt) -> Option<&str> {
    let start = prompt.user_text.find("\"\"\"")? + 3;
    let end = prompt.user_text[start..].find("\"\"\"")? + start;
    Some(prompt.user_text[start..end].trim())
}
