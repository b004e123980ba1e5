//! Sort-of-CLEVR style relational questions over rendered 2-D scenes.
//!
//! Each 64×64 RGB scene holds six objects, one per color, each a square or a
//! circle of side 8. A question names one color and one of six kinds (three
//! non-relational, three relational) and is encoded as 11 bits:
//!
//! | bits   | meaning                                   |
//! |--------|-------------------------------------------|
//! | 0..6   | queried color, one-hot                    |
//! | 6, 7   | non-relational / relational flag, one-hot |
//! | 8..11  | subtype within the group, one-hot         |
//!
//! Answers index a 10-word vocabulary: yes, no, square, circle, 1..6.

use std::fmt;

use kem_core::tensor::Tensor;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::sample_stream;

pub const IMAGE_SIZE: usize = 64;
pub const OBJECT_SIZE: usize = 8;
pub const N_OBJECTS: usize = 6;
pub const N_COLORS: usize = 6;
pub const QUESTION_LEN: usize = 11;
pub const N_ANSWERS: usize = 10;
/// Any two axis-aligned 8×8 squares whose centers are this far apart are disjoint.
pub const MIN_CENTER_DISTANCE: f64 = 12.0;

pub const COLOR_NAMES: [&str; N_COLORS] = ["red", "green", "blue", "orange", "gray", "yellow"];
pub const COLORS: [[f32; 3]; N_COLORS] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 0.5, 0.0],
    [0.5, 0.5, 0.5],
    [1.0, 1.0, 0.0],
];
pub const ANSWER_NAMES: [&str; N_ANSWERS] = ["yes", "no", "square", "circle", "1", "2", "3", "4", "5", "6"];

pub const YES: usize = 0;
pub const NO: usize = 1;

const STREAMS_PER_SAMPLE: u64 = 2;
const SCENE: u64 = 0;
const QUESTION: u64 = 1;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
}

impl Shape {
    pub fn answer(self) -> usize {
        match self {
            Shape::Square => 2,
            Shape::Circle => 3,
        }
    }

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Option<Shape> {
        match code {
            0 => Some(Shape::Square),
            1 => Some(Shape::Circle),
            _ => None,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub color: usize,
    pub shape: Shape,
    /// Pixel center `(x, y)`; `x` grows rightwards, `y` downwards.
    pub center: (u32, u32),
}

impl SceneObject {
    fn distance2(&self, other: &SceneObject) -> u64 {
        let dx = self.center.0 as i64 - other.center.0 as i64;
        let dy = self.center.1 as i64 - other.center.1 as i64;
        (dx * dx + dy * dy) as u64
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuestionKind {
    /// Shape of the queried object.
    Shape,
    /// Is the queried object in the left half?
    Left,
    /// Is the queried object in the top half?
    Top,
    /// Shape of the object nearest to the queried one.
    ClosestShape,
    /// Shape of the object farthest from the queried one.
    FurthestShape,
    /// How many objects share the queried object's shape (itself included)?
    SameShapeCount,
}

impl QuestionKind {
    pub const ALL: [QuestionKind; 6] = [
        QuestionKind::Shape,
        QuestionKind::Left,
        QuestionKind::Top,
        QuestionKind::ClosestShape,
        QuestionKind::FurthestShape,
        QuestionKind::SameShapeCount,
    ];

    pub fn is_relational(self) -> bool {
        self.index() >= 3
    }

    pub fn subtype(self) -> usize {
        self.index() % 3
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub color: usize,
    pub kind: QuestionKind,
}

impl Question {
    pub fn encode(&self) -> [f32; QUESTION_LEN] {
        let mut v = [0.0; QUESTION_LEN];
        v[self.color] = 1.0;
        v[if self.kind.is_relational() { 7 } else { 6 }] = 1.0;
        v[8 + self.kind.subtype()] = 1.0;
        v
    }

    pub fn decode(v: &[f32]) -> Option<Question> {
        if v.len() != QUESTION_LEN || v.iter().any(|&x| x != 0.0 && x != 1.0) {
            return None;
        }
        let one = |r: std::ops::Range<usize>| {
            let hot: Vec<usize> = r.clone().filter(|&i| v[i] == 1.0).map(|i| i - r.start).collect();
            (hot.len() == 1).then(|| hot[0])
        };
        let color = one(0..6)?;
        let rel = one(6..8)?;
        let sub = one(8..11)?;
        Some(Question {
            color,
            kind: QuestionKind::ALL[rel * 3 + sub],
        })
    }
}

impl fmt::Display for Question {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} of {}", self.kind, COLOR_NAMES[self.color])
    }
}

/// Rule oracle. Fails only when the scene has no object of the queried color.
/// Distance ties go to the lower object index.
pub fn answer(objects: &[SceneObject], q: &Question) -> Result<usize> {
    let me = objects
        .iter()
        .position(|o| o.color == q.color)
        .ok_or_else(|| Error::Contract(format!("no {} object in scene", COLOR_NAMES[q.color])))?;
    let obj = &objects[me];
    let half = (IMAGE_SIZE / 2) as u32;
    let yes_no = |b: bool| if b { YES } else { NO };
    let others = || {
        objects
            .iter()
            .enumerate()
            .filter(move |(i, _)| *i != me)
            .map(|(_, o)| o)
    };
    Ok(match q.kind {
        QuestionKind::Shape => obj.shape.answer(),
        QuestionKind::Left => yes_no(obj.center.0 < half),
        QuestionKind::Top => yes_no(obj.center.1 < half),
        QuestionKind::ClosestShape | QuestionKind::FurthestShape => {
            let closest = q.kind == QuestionKind::ClosestShape;
            let mut best: Option<(&SceneObject, u64)> = None;
            for o in others() {
                let d2 = obj.distance2(o);
                let better = match best {
                    None => true,
                    Some((_, b)) => (closest && d2 < b) || (!closest && d2 > b),
                };
                if better {
                    best = Some((o, d2));
                }
            }
            let (o, _) = best.ok_or_else(|| Error::Contract("relational question on a one-object scene".into()))?;
            o.shape.answer()
        }
        QuestionKind::SameShapeCount => 3 + objects.iter().filter(|o| o.shape == obj.shape).count(),
    })
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImbalanceAxis {
    QuestionColor,
}

/// Power-law sampling weights `p(i) ∝ (i+1)^(−exponent)` over the queried color.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    pub exponent: f64,
    pub axis: ImbalanceAxis,
}

impl Default for ImbalanceSpec {
    fn default() -> Self {
        ImbalanceSpec {
            exponent: 2.0,
            axis: ImbalanceAxis::QuestionColor,
        }
    }
}

impl ImbalanceSpec {
    pub fn with_exponent(exponent: f64) -> Self {
        ImbalanceSpec {
            exponent,
            ..Self::default()
        }
    }

    /// Normalized weights over `n` classes.
    pub fn weights(&self, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|i| ((i + 1) as f64).powf(-self.exponent)).collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / z).collect()
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClevrOptions {
    pub imbalance: Option<ImbalanceSpec>,
    /// Sanity-floor variant: every object is a square and every question asks
    /// for the shape of the red object, so the answer is constant.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SortOfClevrSample {
    /// `64 × 64 × 3`, row-major over `(y, x, channel)`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub objects: Vec<SceneObject>,
    pub question: Question,
    pub answer: usize,
}

fn place_objects<R: Rng>(rng: &mut R, degenerate: bool) -> Vec<SceneObject> {
    let lo = (OBJECT_SIZE / 2) as u32;
    let hi = (IMAGE_SIZE - OBJECT_SIZE / 2) as u32;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(N_OBJECTS);
    for color in 0..N_COLORS {
        let center = loop {
            let c = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
            let ok = objects.iter().all(|o| {
                let dx = o.center.0 as f64 - c.0 as f64;
                let dy = o.center.1 as f64 - c.1 as f64;
                (dx * dx + dy * dy).sqrt() >= MIN_CENTER_DISTANCE
            });
            if ok {
                break c;
            }
        };
        let shape = if degenerate || rng.random_bool(0.5) {
            Shape::Square
        } else {
            Shape::Circle
        };
        objects.push(SceneObject { color, shape, center });
    }
    objects
}

pub fn render(objects: &[SceneObject]) -> Tensor<f32> {
    let n = IMAGE_SIZE;
    let mut data = vec![1.0f32; n * n * 3];
    let half = (OBJECT_SIZE / 2) as i64;
    for o in objects {
        let (cx, cy) = (o.center.0 as i64, o.center.1 as i64);
        for y in (cy - half)..(cy + half) {
            for x in (cx - half)..(cx + half) {
                let inside = match o.shape {
                    Shape::Square => true,
                    Shape::Circle => {
                        let dx = x as f64 + 0.5 - cx as f64;
                        let dy = y as f64 + 0.5 - cy as f64;
                        dx * dx + dy * dy <= (half * half) as f64
                    }
                };
                if inside {
                    let at = (y as usize * n + x as usize) * 3;
                    data[at..at + 3].copy_from_slice(&COLORS[o.color]);
                }
            }
        }
    }
    Tensor::new(vec![n, n, 3], data).expect("image shape")
}

/// Scene and question of sample `index`, without rendering.
pub fn scene(seed: u64, index: u64, options: &ClevrOptions) -> (Vec<SceneObject>, Question) {
    let mut rng = sample_stream(seed, index, STREAMS_PER_SAMPLE, SCENE);
    let objects = place_objects(&mut rng, options.degenerate);
    let mut rng = sample_stream(seed, index, STREAMS_PER_SAMPLE, QUESTION);
    let question = if options.degenerate {
        Question {
            color: 0,
            kind: QuestionKind::Shape,
        }
    } else {
        let color = match &options.imbalance {
            Some(spec) => WeightedIndex::new(spec.weights(N_COLORS))
                .expect("positive weights")
                .sample(&mut rng),
            None => rng.random_range(0..N_COLORS),
        };
        Question {
            color,
            kind: QuestionKind::ALL[rng.random_range(0..QuestionKind::ALL.len())],
        }
    };
    (objects, question)
}

pub fn sort_of_clevr_sample(seed: u64, index: u64, options: &ClevrOptions) -> SortOfClevrSample {
    let (objects, question) = scene(seed, index, options);
    let answer = answer(&objects, &question).expect("every color is present");
    SortOfClevrSample {
        image: render(&objects),
        objects,
        question,
        answer,
    }
}

/// Samples `start .. start + count` under `options`.
pub fn gen_sort_of_clevr_range(
    seed: u64,
    start: u64,
    count: usize,
    options: &ClevrOptions,
) -> Result<Vec<SortOfClevrSample>> {
    if count == 0 {
        return Err(Error::Contract("count must be at least 1".into()));
    }
    Ok((start..start + count as u64)
        .map(|i| sort_of_clevr_sample(seed, i, options))
        .collect())
}

pub fn gen_sort_of_clevr(seed: u64, count: usize, imbalance: Option<ImbalanceSpec>) -> Result<Vec<SortOfClevrSample>> {
    gen_sort_of_clevr_range(
        seed,
        0,
        count,
        &ClevrOptions {
            imbalance,
            degenerate: false,
        },
    )
}
