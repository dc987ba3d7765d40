//! Synthetic scenes: sampling, rendering, paired questions, context
//! descriptions and a raster oracle.

pub mod dataset;
pub mod describe;
pub mod guidance;
pub mod image;
pub mod oracle;
pub mod render;
pub mod scene;

pub use dataset::{generate_split, ContextPair, SplitManifest};
pub use describe::{describe_context, ContextDescription, DescriptionMode};
pub use guidance::{make_guidance, Answer, Guidance, Question, Relation, Task};
pub use image::{Image, IMAGE_SIZE};
pub use oracle::{answer_from_attributes, extract_attributes, ObjectAttributes, SceneAttributes};
pub use render::render;
pub use scene::{sample_scene, Background, Color, Scene, SceneConfig, SceneObject, Shape};
