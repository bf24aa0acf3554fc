//! Reference instruction rendering.
//!
//! Turns a room-node sequence into instruction text. The generation prompt's
//! output-format example and the offline mock backends both use it, so the
//! example the model sees and the text the mocks produce always agree.

use crate::model::{Action, Granularity, Trajectory};

/// One room node as the renderer sees it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderStep {
    pub room: String,
    pub objects: Vec<String>,
    pub action: Action,
}

impl RenderStep {
    pub fn new(room: impl Into<String>, objects: Vec<String>, action: Action) -> Self {
        Self {
            room: room.into(),
            objects,
            action,
        }
    }
}

/// Room steps of a grounded trajectory, or `None` if it is not grounded.
pub fn steps_of(traj: &Trajectory) -> Option<Vec<RenderStep>> {
    traj.room_nodes()
        .map(|n| {
            let label = n.label.as_ref()?;
            Some(RenderStep::new(label.room_type.as_str(), label.objects.clone(), n.action?))
        })
        .collect()
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn object_clause(objects: &[String]) -> String {
    let items: Vec<String> = objects.iter().map(|o| format!("the {o}")).collect();
    match items.len() {
        0 => String::new(),
        1 => format!(", where you can see {}", items[0]),
        n => format!(", where you can see {} and {}", items[..n - 1].join(", "), items[n - 1]),
    }
}

/// Renders `steps` (at least two; the last carries `Stop`).
///
/// Coarse: `Start in the kitchen, go straight, then enter the hallway and
/// turn left, then stop in the bedroom.`
///
/// Fine: one sentence per move, `Begin in the kitchen. Go straight and
/// continue until you reach the bedroom. Stop in the bedroom.`, with
/// `, where you can see the ...` after each room when environment details
/// are requested and objects are known.
pub fn render_instruction(steps: &[RenderStep], granularity: Granularity) -> String {
    assert!(steps.len() >= 2, "an instruction needs at least two rooms");
    let last = steps.len() - 1;
    match granularity {
        Granularity::Coarse => {
            let mut s = format!("Start in the {}, {}", steps[0].room, steps[0].action.phrase());
            for step in &steps[1..last] {
                s.push_str(&format!(", then enter the {} and {}", step.room, step.action.phrase()));
            }
            s.push_str(&format!(", then stop in the {}.", steps[last].room));
            s
        }
        Granularity::Fine { environment } => {
            let env = |step: &RenderStep| {
                if environment {
                    object_clause(&step.objects)
                } else {
                    String::new()
                }
            };
            let mut sentences = vec![format!("Begin in the {}{}.", steps[0].room, env(&steps[0]))];
            for pair in steps.windows(2) {
                sentences.push(format!(
                    "{} and continue until you reach the {}{}.",
                    capitalize(pair[0].action.phrase()),
                    pair[1].room,
                    env(&pair[1])
                ));
            }
            sentences.push(format!("Stop in the {}.", steps[last].room));
            sentences.join(" ")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn steps() -> Vec<RenderStep> {
        vec![
            RenderStep::new("kitchen", vec!["stove".into(), "sink".into()], Action::Forward),
            RenderStep::new("hallway", vec![], Action::TurnLeft),
            RenderStep::new("bedroom", vec!["bed".into()], Action::Stop),
        ]
    }

    #[test]
    fn coarse_two_rooms() {
        let s = vec![
            RenderStep::new("kitchen", vec![], Action::Forward),
            RenderStep::new("bedroom", vec![], Action::Stop),
        ];
        assert_eq!(
            render_instruction(&s, Granularity::Coarse),
            "Start in the kitchen, go straight, then stop in the bedroom."
        );
    }

    #[test]
    fn coarse_three_rooms() {
        assert_eq!(
            render_instruction(&steps(), Granularity::Coarse),
            "Start in the kitchen, go straight, then enter the hallway and turn left, then stop in the bedroom."
        );
    }

    #[test]
    fn fine_variants() {
        assert_eq!(
            render_instruction(&steps(), Granularity::Fine { environment: false }),
            "Begin in the kitchen. Go straight and continue until you reach the hallway. \
             Turn left and continue until you reach the bedroom. Stop in the bedroom."
        );
        assert_eq!(
            render_instruction(&steps(), Granularity::Fine { environment: true }),
            "Begin in the kitchen, where you can see the stove and the sink. \
             Go straight and continue until you reach the hallway. \
             Turn left and continue until you reach the bedroom, where you can see the bed. \
             Stop in the bedroom."
        );
    }
}
