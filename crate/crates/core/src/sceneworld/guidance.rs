use std::fmt;

use serde::{Deserialize, Serialize};

use numcore::Stream;

use super::scene::{Background, Color, Scene, SceneObject, Shape};
use crate::error::{Error, Result};
use crate::vocab::{join, tok, Token};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Existence,
    Count,
    Position,
    Color,
    Scene,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::Existence,
        Task::Count,
        Task::Position,
        Task::Color,
        Task::Scene,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Existence => "existence",
            Task::Count => "count",
            Task::Position => "position",
            Task::Color => "color",
            Task::Scene => "scene",
        }
    }

    pub fn token(self) -> Token {
        tok(self.name())
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    Above,
    Below,
    LeftOf,
    RightOf,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::Above,
        Relation::Below,
        Relation::LeftOf,
        Relation::RightOf,
    ];

    pub fn token(self) -> Token {
        tok(match self {
            Relation::Above => "above",
            Relation::Below => "below",
            Relation::LeftOf => "left-of",
            Relation::RightOf => "right-of",
        })
    }

    pub fn from_token(t: Token) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.token() == t)
    }

    pub fn opposite(self) -> Self {
        match self {
            Relation::Above => Relation::Below,
            Relation::Below => Relation::Above,
            Relation::LeftOf => Relation::RightOf,
            Relation::RightOf => Relation::LeftOf,
        }
    }

    pub fn is_vertical(self) -> bool {
        matches!(self, Relation::Above | Relation::Below)
    }

    /// Whether `a` stands in this relation to `b`, given (u, v) centroids
    /// with a top-left origin.
    pub fn holds(self, a: (f64, f64), b: (f64, f64)) -> bool {
        match self {
            Relation::Above => a.1 < b.1,
            Relation::Below => a.1 > b.1,
            Relation::LeftOf => a.0 < b.0,
            Relation::RightOf => a.0 > b.0,
        }
    }

    /// The relation that holds on the same axis as `self`.
    pub fn true_on_axis(self, a: (f64, f64), b: (f64, f64)) -> Self {
        if self.holds(a, b) {
            self
        } else {
            self.opposite()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    pub fn from_bool(b: bool) -> Self {
        if b {
            Answer::Yes
        } else {
            Answer::No
        }
    }

    pub fn is_yes(self) -> bool {
        self == Answer::Yes
    }

    /// Hard answerer score: +1 for yes, -1 for no.
    pub fn score(self) -> f64 {
        if self.is_yes() {
            1.0
        } else {
            -1.0
        }
    }
}

/// A parsed question from the template grammar.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Question {
    Existence { color: Color, shape: Shape },
    Count(usize),
    Position {
        a: (Color, Shape),
        relation: Relation,
        b: (Color, Shape),
    },
    Color { shape: Shape, color: Color },
    Background(Background),
}

impl Question {
    pub fn task(&self) -> Task {
        match self {
            Question::Existence { .. } => Task::Existence,
            Question::Count(_) => Task::Count,
            Question::Position { .. } => Task::Position,
            Question::Color { .. } => Task::Color,
            Question::Background(_) => Task::Scene,
        }
    }

    pub fn tokens(&self) -> Vec<Token> {
        let w = |s: &[&str]| s.iter().map(|x| tok(x)).collect::<Vec<_>>();
        match *self {
            Question::Existence { color, shape } => {
                let mut t = w(&["is", "there", "a"]);
                t.extend([color.token(), shape.token()]);
                t
            }
            Question::Count(n) => {
                let mut t = w(&["are", "there"]);
                t.push(digit(n));
                t.push(tok("objects"));
                t
            }
            Question::Position { a, relation, b } => {
                let mut t = w(&["is", "the"]);
                t.extend([a.0.token(), a.1.token(), relation.token(), tok("the")]);
                t.extend([b.0.token(), b.1.token()]);
                t
            }
            Question::Color { shape, color } => {
                let mut t = w(&["is", "the"]);
                t.extend([shape.token(), color.token()]);
                t
            }
            Question::Background(bg) => {
                let mut t = w(&["is", "the", "background"]);
                t.push(bg.token());
                t
            }
        }
    }

    pub fn parse(tokens: &[Token]) -> Result<Self> {
        let bad = || Error::Question(join(tokens));
        let words: Vec<&str> = tokens.iter().map(|t| t.as_str()).collect();
        let color = |i: usize| Color::from_token(tokens[i]).ok_or_else(bad);
        let shape = |i: usize| Shape::from_token(tokens[i]).ok_or_else(bad);
        match words.as_slice() {
            ["is", "there", "a", _, _] => Ok(Question::Existence {
                color: color(3)?,
                shape: shape(4)?,
            }),
            ["are", "there", n, "objects"] => {
                let n: usize = n.parse().map_err(|_| bad())?;
                Ok(Question::Count(n))
            }
            ["is", "the", "background", _] => Background::from_token(tokens[3])
                .map(Question::Background)
                .ok_or_else(bad),
            ["is", "the", _, _, _, "the", _, _] => Ok(Question::Position {
                a: (color(2)?, shape(3)?),
                relation: Relation::from_token(tokens[4]).ok_or_else(bad)?,
                b: (color(6)?, shape(7)?),
            }),
            ["is", "the", _, _] => Ok(Question::Color {
                shape: shape(2)?,
                color: color(3)?,
            }),
            _ => Err(bad()),
        }
    }

    /// Ground truth of the question against a scene.
    pub fn answer_for(&self, scene: &Scene) -> Answer {
        let centroid = |(c, s): (Color, Shape)| scene.find(c, s).map(SceneObject::centroid);
        Answer::from_bool(match *self {
            Question::Existence { color, shape } => scene.find(color, shape).is_some(),
            Question::Count(n) => scene.objects.len() == n,
            Question::Position { a, relation, b } => match (centroid(a), centroid(b)) {
                (Some(ca), Some(cb)) => relation.holds(ca, cb),
                _ => false,
            },
            Question::Color { shape, color } => scene
                .objects
                .iter()
                .any(|o| o.shape == shape && o.color == color),
            Question::Background(bg) => scene.background == bg,
        })
    }
}

pub(crate) fn digit(n: usize) -> Token {
    tok(&n.min(9).to_string())
}

/// Text guidance: one question of a yes/no pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Guidance {
    pub task: Task,
    pub question: Vec<Token>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<Answer>,
    pub pair_id: u64,
}

impl Guidance {
    pub fn parsed(&self) -> Result<Question> {
        Question::parse(&self.question)
    }

    pub fn without_answer(&self) -> Self {
        Self {
            answer: None,
            ..self.clone()
        }
    }
}

/// Minimum centroid separation on the queried axis for position questions.
pub const POSITION_MARGIN: f64 = 0.05;
const POSITION_ATTEMPTS: usize = 64;

/// Builds a (positive, negative) question pair about `scene` for `task`.
///
/// Fails with [`Error::NoTemplate`] when the task has no valid question for
/// this scene (position with fewer than two objects or only tied layouts,
/// color with no shape that occurs once); callers resample the scene.
pub fn make_guidance(
    scene: &Scene,
    task: Task,
    stream: &mut Stream,
    with_answer: bool,
) -> Result<(Guidance, Guidance)> {
    let no_template = || Error::NoTemplate { task: task.name() };
    let objects = &scene.objects;
    if objects.is_empty() {
        return Err(no_template());
    }
    let (pos, neg) = match task {
        Task::Existence => {
            let o = objects[stream.below(objects.len())];
            let absent: Vec<(Color, Shape)> = Color::ALL
                .iter()
                .flat_map(|&c| Shape::ALL.iter().map(move |&s| (c, s)))
                .filter(|&(c, s)| scene.find(c, s).is_none())
                .collect();
            let (c, s) = absent[stream.below(absent.len())];
            (
                Question::Existence {
                    color: o.color,
                    shape: o.shape,
                },
                Question::Existence { color: c, shape: s },
            )
        }
        Task::Count => {
            let n = objects.len();
            let others: Vec<usize> = (1..=4).filter(|&k| k != n).collect();
            (
                Question::Count(n),
                Question::Count(others[stream.below(others.len())]),
            )
        }
        Task::Position => {
            if objects.len() < 2 {
                return Err(no_template());
            }
            let mut found = None;
            for _ in 0..POSITION_ATTEMPTS {
                let i = stream.below(objects.len());
                let mut j = stream.below(objects.len() - 1);
                if j >= i {
                    j += 1;
                }
                let axis = Relation::ALL[stream.below(4)];
                let (ca, cb) = (objects[i].centroid(), objects[j].centroid());
                let delta = if axis.is_vertical() {
                    ca.1 - cb.1
                } else {
                    ca.0 - cb.0
                };
                if delta.abs() >= POSITION_MARGIN {
                    found = Some((i, j, axis.true_on_axis(ca, cb)));
                    break;
                }
            }
            let (i, j, rel) = found.ok_or_else(no_template)?;
            let a = objects[i].descriptor();
            let b = objects[j].descriptor();
            (
                Question::Position { a, relation: rel, b },
                Question::Position {
                    a,
                    relation: rel.opposite(),
                    b,
                },
            )
        }
        Task::Color => {
            let unique: Vec<&SceneObject> = objects
                .iter()
                .filter(|o| objects.iter().filter(|p| p.shape == o.shape).count() == 1)
                .collect();
            if unique.is_empty() {
                return Err(no_template());
            }
            let o = unique[stream.below(unique.len())];
            let others: Vec<Color> = Color::ALL.into_iter().filter(|&c| c != o.color).collect();
            (
                Question::Color {
                    shape: o.shape,
                    color: o.color,
                },
                Question::Color {
                    shape: o.shape,
                    color: others[stream.below(others.len())],
                },
            )
        }
        Task::Scene => {
            let others: Vec<Background> = Background::ALL
                .into_iter()
                .filter(|&b| b != scene.background)
                .collect();
            (
                Question::Background(scene.background),
                Question::Background(others[stream.below(others.len())]),
            )
        }
    };
    let pair_id = stream.next_u64();
    let build = |q: Question, a: Answer| Guidance {
        task,
        question: q.tokens(),
        answer: with_answer.then_some(a),
        pair_id,
    };
    Ok((build(pos, Answer::Yes), build(neg, Answer::No)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sceneworld::scene::{sample_scene, SceneConfig};
    use crate::vocab::parse_words;
    use numcore::StreamKey;

    fn two_objects() -> Scene {
        Scene {
            objects: vec![
                SceneObject {
                    shape: Shape::Circle,
                    color: Color::Red,
                    center: (0.3, 0.3),
                    radius: 0.1,
                },
                SceneObject {
                    shape: Shape::Square,
                    color: Color::Blue,
                    center: (0.7, 0.7),
                    radius: 0.1,
                },
            ],
            background: Background::PlainDark,
        }
    }

    #[test]
    fn red_circle_is_above_blue_square() {
        let q = Question::parse(&parse_words("is the red circle above the blue square").unwrap())
            .unwrap();
        assert_eq!(q.answer_for(&two_objects()), Answer::Yes);
        let q = Question::parse(&parse_words("is the red circle below the blue square").unwrap())
            .unwrap();
        assert_eq!(q.answer_for(&two_objects()), Answer::No);
    }

    #[test]
    fn count_pair() {
        let mut scene = two_objects();
        scene.objects.push(SceneObject {
            shape: Shape::Triangle,
            color: Color::Green,
            center: (0.2, 0.8),
            radius: 0.09,
        });
        let root = StreamKey::root(2);
        for i in 0..50 {
            let (p, n) = make_guidance(&scene, Task::Count, &mut root.index(i).stream(), true)
                .unwrap();
            assert_eq!(join(&p.question), "are there 3 objects");
            let Question::Count(k) = n.parsed().unwrap() else {
                panic!("not a count question")
            };
            assert!([1, 2, 4].contains(&k));
            assert_eq!(p.answer, Some(Answer::Yes));
            assert_eq!(n.answer, Some(Answer::No));
            assert_eq!(p.pair_id, n.pair_id);
        }
    }

    #[test]
    fn answers_withheld() {
        let (p, n) = make_guidance(&two_objects(), Task::Scene, &mut Stream::from_seed(0), false)
            .unwrap();
        assert!(p.answer.is_none() && n.answer.is_none());
    }

    #[test]
    fn single_object_has_no_position_question() {
        let mut scene = two_objects();
        scene.objects.truncate(1);
        assert!(matches!(
            make_guidance(&scene, Task::Position, &mut Stream::from_seed(0), true),
            Err(Error::NoTemplate { .. })
        ));
    }

    #[test]
    fn pairs_have_opposite_truth_and_parse_back() {
        let root = StreamKey::root(4);
        let mut made = 0;
        for i in 0..2000 {
            let key = root.index(i);
            let scene = sample_scene(&mut key.child("scene").stream(), &SceneConfig::default())
                .unwrap();
            let task = Task::ALL[(i % 5) as usize];
            let Ok((p, n)) = make_guidance(&scene, task, &mut key.child("q").stream(), true) else {
                continue;
            };
            made += 1;
            let (qp, qn) = (p.parsed().unwrap(), n.parsed().unwrap());
            assert_eq!(qp.tokens(), p.question);
            assert_eq!(qp.task(), task);
            assert_eq!(qp.answer_for(&scene), Answer::Yes);
            assert_eq!(qn.answer_for(&scene), Answer::No);
        }
        assert!(made > 1500);
    }

    #[test]
    fn rejects_ungrammatical() {
        assert!(Question::parse(&parse_words("is there red").unwrap()).is_err());
        assert!(Question::parse(&parse_words("is the red red").unwrap()).is_err());
    }
}
