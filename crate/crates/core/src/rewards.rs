//! Differentiable rewards and their weighted composite.
//!
//! Every reward is built from smooth primitives on the tape so its gradient
//! reaches the noise leaf. Four of them score slot scenes against a prompt:
//!
//! | kind        | range  | measures                                             |
//! |-------------|--------|------------------------------------------------------|
//! | `attribute` | (0, 1] | some present slot carries each requested color       |
//! | `spatial`   | (0, 1) | the color-matched objects obey the prompt relation   |
//! | `count`     | (0, 1] | the soft slot count hits the count target            |
//! | `embedding` | [0, 1] | cosine agreement of the scene and prompt embeddings  |
//!
//! `rugged` and `quadratic` read the latent directly and exist for analytic
//! landscapes.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::generator::{PromptSpec, RelationKind, Scene, SceneGraph};

pub const DEFAULT_SIGMA: f64 = 0.25;
pub const DEFAULT_BETA: f64 = 10.0;
pub const DEFAULT_KAPPA: f64 = 5.0;
pub const DEFAULT_RUGGED_TEMPERATURE: f64 = 50.0;

fn default_weight() -> f64 {
    1.0
}
fn default_sigma() -> f64 {
    DEFAULT_SIGMA
}
fn default_beta() -> f64 {
    DEFAULT_BETA
}
fn default_kappa() -> f64 {
    DEFAULT_KAPPA
}
fn default_temperature() -> f64 {
    DEFAULT_RUGGED_TEMPERATURE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: Vec<f64>,
    pub height: f64,
    pub width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardKind {
    Attribute {
        #[serde(default = "default_sigma")]
        sigma: f64,
        #[serde(default = "default_beta")]
        beta: f64,
    },
    Spatial {
        #[serde(default = "default_sigma")]
        sigma: f64,
        #[serde(default = "default_kappa")]
        kappa: f64,
    },
    Count,
    Embedding,
    Rugged {
        bumps: Vec<Bump>,
        #[serde(default = "default_temperature")]
        temperature: f64,
    },
    /// `−‖ε − target‖²`, concave with its maximum at `target`.
    Quadratic {
        target: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    #[serde(default = "default_weight")]
    pub weight: f64,
    #[serde(flatten)]
    pub kind: RewardKind,
}

impl RewardSpec {
    pub fn new(kind: RewardKind) -> Self {
        RewardSpec { weight: 1.0, kind }
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            RewardKind::Attribute { .. } => "attribute",
            RewardKind::Spatial { .. } => "spatial",
            RewardKind::Count => "count",
            RewardKind::Embedding => "embedding",
            RewardKind::Rugged { .. } => "rugged",
            RewardKind::Quadratic { .. } => "quadratic",
        }
    }

    /// The attribute/spatial/count/embedding quartet at default bandwidths.
    pub fn default_set() -> Vec<RewardSpec> {
        vec![
            RewardSpec::new(RewardKind::Attribute {
                sigma: DEFAULT_SIGMA,
                beta: DEFAULT_BETA,
            }),
            RewardSpec::new(RewardKind::Spatial {
                sigma: DEFAULT_SIGMA,
                kappa: DEFAULT_KAPPA,
            }),
            RewardSpec::new(RewardKind::Count),
            RewardSpec::new(RewardKind::Embedding),
        ]
    }

    /// A spatial reward has nothing to score on a prompt without a relation.
    pub fn applies_to(&self, prompt: &PromptSpec) -> bool {
        !matches!(self.kind, RewardKind::Spatial { .. }) || prompt.relation.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.weight.is_finite() || self.weight < 0.0 {
            return Err(Error::Config(format!(
                "{} weight must be non-negative, got {}",
                self.name(),
                self.weight
            )));
        }
        match &self.kind {
            RewardKind::Attribute { sigma, beta } => {
                positive("sigma", *sigma)?;
                positive("beta", *beta)
            }
            RewardKind::Spatial { sigma, kappa } => {
                positive("sigma", *sigma)?;
                positive("kappa", *kappa)
            }
            RewardKind::Rugged { bumps, temperature } => {
                positive("temperature", *temperature)?;
                validate_bumps(bumps)
            }
            _ => Ok(()),
        }
    }

    /// Records this reward for `graph`. Returns `None` when the reward does
    /// not apply to the prompt.
    pub fn record(
        &self,
        tape: &mut Tape,
        graph: &SceneGraph,
        prompt: &PromptSpec,
    ) -> Result<Option<NodeId>> {
        if !self.applies_to(prompt) {
            return Ok(None);
        }
        let node = match &self.kind {
            RewardKind::Attribute { sigma, beta } => {
                record_attribute(tape, graph, prompt, *sigma, *beta)?
            }
            RewardKind::Spatial { sigma, kappa } => {
                record_spatial(tape, graph, prompt, *sigma, *kappa)?
            }
            RewardKind::Count => record_count(tape, graph, prompt)?,
            RewardKind::Embedding => record_embedding(tape, graph, prompt)?,
            RewardKind::Rugged { bumps, temperature } => {
                record_rugged(tape, graph.noise, bumps, *temperature)?
            }
            RewardKind::Quadratic { target } => {
                let t = tape.constant(target.clone());
                let d = tape.squared_distance(graph.noise, t)?;
                tape.scale(d, -1.0)?
            }
        };
        Ok(Some(node))
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

fn validate_bumps(bumps: &[Bump]) -> Result<()> {
    let Some(first) = bumps.first() else {
        return Err(Error::Config(
            "rugged reward needs at least one bump".into(),
        ));
    };
    for b in bumps {
        positive("bump width", b.width)?;
        if b.center.len() != first.center.len() {
            return Err(Error::Config("bump centers differ in dimension".into()));
        }
    }
    Ok(())
}

fn require_slots(graph: &SceneGraph) -> Result<(NodeId, NodeId, NodeId)> {
    match (graph.presences, graph.xs, graph.ys) {
        (Some(p), Some(x), Some(y)) => Ok((p, x, y)),
        _ => Err(Error::Contract(
            "reward needs a scene with object slots".into(),
        )),
    }
}

/// Squared color distance from every slot to `target`, as one K-vector.
fn color_distances(tape: &mut Tape, graph: &SceneGraph, target: [f64; 3]) -> Result<NodeId> {
    let t = tape.constant(target.to_vec());
    let mut d = Vec::with_capacity(graph.color.len());
    for &c in &graph.color {
        d.push(tape.squared_distance(c, t)?);
    }
    tape.concat(&d)
}

pub fn record_attribute(
    tape: &mut Tape,
    graph: &SceneGraph,
    prompt: &PromptSpec,
    sigma: f64,
    beta: f64,
) -> Result<NodeId> {
    positive("sigma", sigma)?;
    positive("beta", beta)?;
    let (presences, _, _) = require_slots(graph)?;
    if prompt.objects.is_empty() {
        return Err(Error::Contract(
            "attribute reward needs at least one object".into(),
        ));
    }
    // Soft max over slots of β·m, divided by the same soft max with every m = 1.
    let k = graph.slot_count() as f64;
    let norm = 1.0 / (beta + k.ln());
    let mut scores = Vec::with_capacity(prompt.objects.len());
    for obj in &prompt.objects {
        let d = color_distances(tape, graph, obj.target_color)?;
        let kernel = tape.scale(d, -1.0 / (sigma * sigma))?;
        let kernel = tape.exp(kernel)?;
        let matched = tape.mul(presences, kernel)?;
        let scaled = tape.scale(matched, beta)?;
        let lse = tape.logsumexp(scaled)?;
        scores.push(tape.scale(lse, norm)?);
    }
    let all = tape.concat(&scores)?;
    tape.mean(all)
}

pub fn record_spatial(
    tape: &mut Tape,
    graph: &SceneGraph,
    prompt: &PromptSpec,
    sigma: f64,
    kappa: f64,
) -> Result<NodeId> {
    positive("sigma", sigma)?;
    positive("kappa", kappa)?;
    let rel = prompt
        .relation
        .as_ref()
        .ok_or_else(|| Error::Contract("spatial reward needs a relation".into()))?;
    let (_, xs, ys) = require_slots(graph)?;
    let n = prompt.objects.len();
    if rel.subject >= n || rel.object >= n {
        return Err(Error::Contract(
            "relation references a missing object".into(),
        ));
    }
    let coords = match rel.kind {
        RelationKind::LeftOf => xs,
        RelationKind::Above => ys,
    };
    let mut centroid = |idx: usize| -> Result<NodeId> {
        let d = color_distances(tape, graph, prompt.objects[idx].target_color)?;
        let logits = tape.scale(d, -1.0 / (sigma * sigma))?;
        let w = tape.softmax(logits)?;
        tape.dot(w, coords)
    };
    let subj = centroid(rel.subject)?;
    let obj = centroid(rel.object)?;
    // left-of: object to the right of subject. above: subject higher than object.
    let diff = match rel.kind {
        RelationKind::LeftOf => tape.sub(obj, subj)?,
        RelationKind::Above => tape.sub(subj, obj)?,
    };
    let z = tape.scale(diff, kappa)?;
    tape.sigmoid(z)
}

pub fn record_count(tape: &mut Tape, graph: &SceneGraph, prompt: &PromptSpec) -> Result<NodeId> {
    let (presences, _, _) = require_slots(graph)?;
    let c = tape.sum(presences)?;
    let off = tape.shift(c, -(prompt.count_target as f64))?;
    let sq = tape.square(off)?;
    let neg = tape.scale(sq, -1.0)?;
    tape.exp(neg)
}

pub fn record_embedding(
    tape: &mut Tape,
    graph: &SceneGraph,
    prompt: &PromptSpec,
) -> Result<NodeId> {
    let target = tape.constant(prompt.target_embedding.clone());
    let cos = tape.cosine(graph.embedding, target)?;
    let half = tape.scale(cos, 0.5)?;
    tape.shift(half, 0.5)
}

pub fn record_rugged(
    tape: &mut Tape,
    latent: NodeId,
    bumps: &[Bump],
    temperature: f64,
) -> Result<NodeId> {
    validate_bumps(bumps)?;
    positive("temperature", temperature)?;
    let mut heights = Vec::with_capacity(bumps.len());
    for b in bumps {
        let c = tape.constant(b.center.clone());
        let d = tape.squared_distance(latent, c)?;
        let z = tape.scale(d, -1.0 / (b.width * b.width))?;
        let k = tape.exp(z)?;
        heights.push(tape.scale(k, b.height)?);
    }
    let v = tape.concat(&heights)?;
    let v = tape.scale(v, temperature)?;
    let lse = tape.logsumexp(v)?;
    tape.scale(lse, 1.0 / temperature)
}

fn on_scene<F>(scene: &Scene, f: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, &SceneGraph) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let graph = SceneGraph::from_scene(&mut tape, scene)?;
    let node = f(&mut tape, &graph)?;
    Ok(tape.scalar(node))
}

pub fn attribute_reward(scene: &Scene, prompt: &PromptSpec, sigma: f64, beta: f64) -> Result<f64> {
    on_scene(scene, |t, g| record_attribute(t, g, prompt, sigma, beta))
}

pub fn spatial_reward(scene: &Scene, prompt: &PromptSpec, sigma: f64, kappa: f64) -> Result<f64> {
    on_scene(scene, |t, g| record_spatial(t, g, prompt, sigma, kappa))
}

pub fn count_reward(scene: &Scene, prompt: &PromptSpec) -> Result<f64> {
    on_scene(scene, |t, g| record_count(t, g, prompt))
}

pub fn embedding_reward(scene: &Scene, prompt: &PromptSpec) -> Result<f64> {
    on_scene(scene, |t, g| record_embedding(t, g, prompt))
}

pub fn rugged_reward(latent: &[f64], bumps: &[Bump], temperature: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(latent.to_vec());
    let node = record_rugged(&mut tape, x, bumps, temperature)?;
    Ok(tape.scalar(node))
}

/// Per-reward scores and their weighted sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub per_reward: Vec<(String, f64)>,
    pub total: f64,
}

impl RewardBreakdown {
    /// Builds the breakdown from `(name, weight, score)` triples.
    pub fn from_scores<'a, I>(scores: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, f64, f64)>,
    {
        let mut per_reward = Vec::new();
        let mut total = 0.0;
        for (name, weight, score) in scores {
            total += weight * score;
            per_reward.push((name.to_string(), score));
        }
        RewardBreakdown { per_reward, total }
    }

    pub fn score(&self, name: &str) -> Option<f64> {
        self.per_reward
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, s)| s)
    }
}

/// Weighted sum of all rewards in `specs` that apply to `prompt`.
pub fn composite_reward(
    scene: &Scene,
    prompt: &PromptSpec,
    specs: &[RewardSpec],
) -> Result<RewardBreakdown> {
    if specs.is_empty() {
        return Err(Error::Config(
            "composite reward needs at least one reward".into(),
        ));
    }
    let mut tape = Tape::new();
    let graph = SceneGraph::from_scene(&mut tape, scene)?;
    let mut scores = Vec::with_capacity(specs.len());
    for spec in specs {
        spec.validate()?;
        if let Some(node) = spec.record(&mut tape, &graph, prompt)? {
            scores.push((spec.name(), spec.weight, tape.scalar(node)));
        }
    }
    Ok(RewardBreakdown::from_scores(scores))
}
