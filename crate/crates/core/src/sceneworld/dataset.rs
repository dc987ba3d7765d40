use serde::{Deserialize, Serialize};

use numcore::StreamKey;

use super::describe::{describe_context, ContextDescription, DescriptionMode};
use super::guidance::{make_guidance, Guidance, Task};
use super::image::Image;
use super::render::render;
use super::scene::{sample_scene, Scene, SceneConfig};
use crate::error::{Error, Result};

/// A reference scene with one yes/no question pair and its description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextPair {
    pub id: u64,
    pub scene: Scene,
    pub task: Task,
    pub positive: Guidance,
    pub negative: Guidance,
    pub description: ContextDescription,
}

impl ContextPair {
    pub fn image(&self) -> Image {
        render(&self.scene)
    }

    pub fn questions(&self) -> [&Guidance; 2] {
        [&self.positive, &self.negative]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split: String,
    pub seed: u64,
    pub items: Vec<ContextPair>,
}

const MAX_SCENE_RESAMPLES: u64 = 100;

/// Draws one context. The task is fixed first so that the task mix is not
/// skewed by scenes that admit no question for it.
pub fn sample_context(
    key: StreamKey,
    id: u64,
    scene_cfg: &SceneConfig,
    mode: DescriptionMode,
    with_answer: bool,
    tasks: &[Task],
) -> Result<ContextPair> {
    if tasks.is_empty() {
        return Err(Error::Config("no tasks selected".into()));
    }
    let task = tasks[key.child("task").stream().below(tasks.len())];
    for attempt in 0..MAX_SCENE_RESAMPLES {
        let k = key.index(attempt);
        let scene = sample_scene(&mut k.child("scene").stream(), scene_cfg)?;
        match make_guidance(&scene, task, &mut k.child("question").stream(), with_answer) {
            Ok((positive, negative)) => {
                let description = describe_context(&scene, &positive, mode)?;
                return Ok(ContextPair {
                    id,
                    scene,
                    task,
                    positive,
                    negative,
                    description,
                });
            }
            Err(Error::NoTemplate { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::NoTemplate { task: task.name() })
}

/// `n` contexts drawn from independent streams `key.index(i)`.
pub fn generate_split(
    key: StreamKey,
    n: usize,
    scene_cfg: &SceneConfig,
    mode: DescriptionMode,
    with_answer: bool,
    tasks: &[Task],
) -> Result<Vec<ContextPair>> {
    (0..n as u64)
        .map(|i| sample_context(key.index(i), i, scene_cfg, mode, with_answer, tasks))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_deterministic_and_covers_tasks() {
        let key = StreamKey::root(1).child("train");
        let a = generate_split(key, 200, &SceneConfig::default(), DescriptionMode::Focused, true, &Task::ALL)
            .unwrap();
        let b = generate_split(key, 200, &SceneConfig::default(), DescriptionMode::Focused, true, &Task::ALL)
            .unwrap();
        assert_eq!(a, b);
        for t in Task::ALL {
            assert!(a.iter().filter(|c| c.task == t).count() > 20, "{t}");
        }
    }

    #[test]
    fn manifest_roundtrip() {
        let items = generate_split(
            StreamKey::root(2),
            5,
            &SceneConfig::default(),
            DescriptionMode::Focused,
            false,
            &Task::ALL,
        )
        .unwrap();
        let m = SplitManifest {
            split: "eval".into(),
            seed: 2,
            items,
        };
        let json = serde_json::to_string(&m).unwrap();
        assert!(!json.contains("\"answer\""));
        assert_eq!(serde_json::from_str::<SplitManifest>(&json).unwrap(), m);
    }
}
