use serde::{Deserialize, Serialize};

use super::guidance::{digit, Guidance, Question, Task};
use super::scene::{Scene, SceneObject};
use crate::error::{Error, Result};
use crate::vocab::{tok, Token, CLS};

pub const MAX_DESCRIPTION_LEN: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DescriptionMode {
    /// Global tokens plus the attributes the question is about.
    #[default]
    Focused,
    /// Additionally verbalizes every object with a coarse region token.
    FullScene,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextDescription {
    pub tokens: Vec<Token>,
    pub focus_task: Task,
}

fn region(obj: &SceneObject) -> Token {
    let (u, v) = obj.centroid();
    let third = |x: f64| ((x * 3.0).floor() as usize).min(2);
    const NAMES: [[&str; 3]; 3] = [
        ["top-left", "top", "top-right"],
        ["left", "center", "right"],
        ["bottom-left", "bottom", "bottom-right"],
    ];
    tok(NAMES[third(v)][third(u)])
}

/// Verbalizes the true scene attributes relevant to `guidance`.
///
/// The output depends on the scene and on which attribute the question
/// targets, never on the candidate answer, so both questions of a pair get
/// the same description.
pub fn describe_context(
    scene: &Scene,
    guidance: &Guidance,
    mode: DescriptionMode,
) -> Result<ContextDescription> {
    let question = guidance.parsed()?;
    let mut t = vec![
        CLS,
        scene.background.token(),
        tok("count"),
        digit(scene.objects.len()),
    ];
    if mode == DescriptionMode::FullScene {
        for o in &scene.objects {
            t.extend([o.color.token(), o.shape.token(), region(o)]);
        }
    }
    t.push(guidance.task.token());
    match question {
        Question::Existence { .. } => {
            for o in &scene.objects {
                t.extend([o.color.token(), o.shape.token()]);
            }
        }
        Question::Count(_) => t.push(tok("objects")),
        Question::Position { a, relation, b } => {
            let find = |(c, s)| {
                scene
                    .find(c, s)
                    .map(SceneObject::centroid)
                    .ok_or_else(|| Error::Inconsistent("position question names a missing object".into()))
            };
            let rel = relation.true_on_axis(find(a)?, find(b)?);
            t.extend([a.0.token(), a.1.token(), rel.token(), b.0.token(), b.1.token()]);
        }
        Question::Color { shape, .. } => {
            let o = scene
                .objects
                .iter()
                .find(|o| o.shape == shape)
                .ok_or_else(|| Error::Inconsistent("color question names a missing shape".into()))?;
            t.extend([o.shape.token(), o.color.token()]);
        }
        Question::Background(_) => t.extend([tok("background"), scene.background.token()]),
    }
    t.truncate(MAX_DESCRIPTION_LEN);
    Ok(ContextDescription {
        tokens: t,
        focus_task: guidance.task,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sceneworld::guidance::make_guidance;
    use crate::sceneworld::scene::{sample_scene, Background, Color, SceneConfig, Shape};
    use crate::vocab::join;
    use numcore::{Stream, StreamKey};

    fn scene() -> Scene {
        Scene {
            objects: vec![
                SceneObject {
                    shape: Shape::Circle,
                    color: Color::Green,
                    center: (0.25, 0.7),
                    radius: 0.1,
                },
                SceneObject {
                    shape: Shape::Triangle,
                    color: Color::Yellow,
                    center: (0.8, 0.2),
                    radius: 0.12,
                },
            ],
            background: Background::PlainDark,
        }
    }

    #[test]
    fn count_description() {
        let (p, n) = make_guidance(&scene(), Task::Count, &mut Stream::from_seed(3), true).unwrap();
        let dp = describe_context(&scene(), &p, DescriptionMode::Focused).unwrap();
        let dn = describe_context(&scene(), &n, DescriptionMode::Focused).unwrap();
        let text = join(&dp.tokens);
        assert!(text.contains("count 2"), "{text}");
        assert!(text.contains("plain-dark"));
        assert_eq!(dp, dn);
        assert_eq!(dp.tokens[0], CLS);
    }

    #[test]
    fn full_scene_mentions_regions() {
        let (p, _) = make_guidance(&scene(), Task::Scene, &mut Stream::from_seed(1), true).unwrap();
        let d = describe_context(&scene(), &p, DescriptionMode::FullScene).unwrap();
        let text = join(&d.tokens);
        assert!(text.contains("green circle bottom-left"), "{text}");
        assert!(text.contains("yellow triangle top-right"), "{text}");
    }

    #[test]
    fn pair_descriptions_match_and_fit() {
        let root = StreamKey::root(8);
        for i in 0..3000 {
            let key = root.index(i);
            let s = sample_scene(&mut key.child("scene").stream(), &SceneConfig::default()).unwrap();
            let task = Task::ALL[(i % 5) as usize];
            let Ok((p, n)) = make_guidance(&s, task, &mut key.child("q").stream(), true) else {
                continue;
            };
            for mode in [DescriptionMode::Focused, DescriptionMode::FullScene] {
                let dp = describe_context(&s, &p, mode).unwrap();
                assert_eq!(dp, describe_context(&s, &n, mode).unwrap());
                assert!(dp.tokens.len() <= MAX_DESCRIPTION_LEN);
            }
        }
    }
}
