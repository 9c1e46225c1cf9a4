//! Frozen one-step generators mapping a noise vector to a [`Scene`].
//!
//! [`Generator::Slots`] is a single affine layer followed by per-slot
//! squashing: every slot gets a presence in (0,1), an RGB color in (0,1)³ and
//! a position in (−1,1)², and the concatenated slot features are pooled into a
//! unit-norm embedding. [`Generator::Identity`] passes the noise through
//! unchanged and is used for analytic landscapes.
//!
//! The generator never looks at the prompt. Prompts only condition rewards.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{norm, Matrix, NodeId, Tape};
use crate::error::{Error, Result};

/// presence + RGB + (x, y)
pub const SLOT_FEATURES: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NoiseVector(pub Vec<f64>);

impl NoiseVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `d` i.i.d. standard-normal draws from `rng`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Self {
        NoiseVector((0..d).map(|_| StandardNormal.sample(rng)).collect())
    }
}

impl From<Vec<f64>> for NoiseVector {
    fn from(v: Vec<f64>) -> Self {
        NoiseVector(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Color,
    Spatial,
    Numeracy,
    Complex,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Color,
        Category::Spatial,
        Category::Numeracy,
        Category::Complex,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Color => "color",
            Category::Spatial => "spatial",
            Category::Numeracy => "numeracy",
            Category::Complex => "complex",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelationKind {
    LeftOf,
    Above,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub subject: usize,
    pub object: usize,
    pub kind: RelationKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptObject {
    pub target_color: [f64; 3],
}

/// A synthetic compositional prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub objects: Vec<PromptObject>,
    pub relation: Option<Relation>,
    pub count_target: usize,
    pub target_embedding: Vec<f64>,
    pub category: Category,
}

impl PromptSpec {
    /// Checks the invariants against a generator with `slots` slots and an
    /// embedding of `embed_dim` entries.
    pub fn validate(&self, slots: usize, embed_dim: usize) -> Result<()> {
        if let Some(rel) = &self.relation {
            let n = self.objects.len();
            if rel.subject >= n || rel.object >= n {
                return Err(Error::Contract(format!(
                    "relation ({}, {}) references objects beyond {n}",
                    rel.subject, rel.object
                )));
            }
        }
        if self.count_target > slots {
            return Err(Error::Contract(format!(
                "count target {} exceeds slot count {slots}",
                self.count_target
            )));
        }
        if self.target_embedding.len() != embed_dim {
            return Err(Error::Contract(format!(
                "target embedding has {} entries, expected {embed_dim}",
                self.target_embedding.len()
            )));
        }
        if (norm(&self.target_embedding) - 1.0).abs() > 1e-9 {
            return Err(Error::Contract("target embedding is not unit norm".into()));
        }
        for o in &self.objects {
            if o.target_color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Contract("target color outside [0,1]".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub presence: f64,
    pub color: [f64; 3],
    pub position: [f64; 2],
}

/// Generator output.
///
/// `latent` is the noise the scene was decoded from. For the identity
/// generator the scene has no slots and `embedding == latent`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub slots: Vec<Slot>,
    pub embedding: Vec<f64>,
    pub latent: Vec<f64>,
}

/// Tape handles for a generated scene.
#[derive(Clone, Debug)]
pub struct SceneGraph {
    pub noise: NodeId,
    /// Per slot: presence (1), color (3), position (2).
    pub presence: Vec<NodeId>,
    pub color: Vec<NodeId>,
    pub position: Vec<NodeId>,
    /// All presences as one vector of length K.
    pub presences: Option<NodeId>,
    pub xs: Option<NodeId>,
    pub ys: Option<NodeId>,
    pub embedding: NodeId,
}

impl SceneGraph {
    pub fn slot_count(&self) -> usize {
        self.presence.len()
    }

    /// Reads the recorded values back into a [`Scene`].
    pub fn scene(&self, tape: &Tape) -> Scene {
        let slots = (0..self.slot_count())
            .map(|k| {
                let c = tape.value(self.color[k]);
                let p = tape.value(self.position[k]);
                Slot {
                    presence: tape.scalar(self.presence[k]),
                    color: [c[0], c[1], c[2]],
                    position: [p[0], p[1]],
                }
            })
            .collect();
        Scene {
            slots,
            embedding: tape.value(self.embedding).to_vec(),
            latent: tape.value(self.noise).to_vec(),
        }
    }

    /// Places an already-evaluated scene on `tape` as constants so the reward
    /// code can score it without a generator.
    pub fn from_scene(tape: &mut Tape, scene: &Scene) -> Result<Self> {
        let noise = tape.constant(scene.latent.clone());
        let mut graph = SceneGraph {
            noise,
            presence: Vec::new(),
            color: Vec::new(),
            position: Vec::new(),
            presences: None,
            xs: None,
            ys: None,
            embedding: tape.constant(scene.embedding.clone()),
        };
        for s in &scene.slots {
            graph.presence.push(tape.constant(vec![s.presence]));
            graph.color.push(tape.constant(s.color.to_vec()));
            graph.position.push(tape.constant(s.position.to_vec()));
        }
        graph.collect_slot_vectors(tape)?;
        Ok(graph)
    }

    fn collect_slot_vectors(&mut self, tape: &mut Tape) -> Result<()> {
        if self.presence.is_empty() {
            return Ok(());
        }
        self.presences = Some(tape.concat(&self.presence)?);
        let mut xs = Vec::with_capacity(self.position.len());
        let mut ys = Vec::with_capacity(self.position.len());
        for &p in &self.position {
            xs.push(tape.slice(p, 0, 1)?);
            ys.push(tape.slice(p, 1, 1)?);
        }
        self.xs = Some(tape.concat(&xs)?);
        self.ys = Some(tape.concat(&ys)?);
        Ok(())
    }
}

/// Frozen parameters of the slot generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub d: usize,
    pub slots: usize,
    pub embed_dim: usize,
    /// `(slots · 6) × d`
    pub w: Arc<Matrix>,
    pub b: Arc<Vec<f64>>,
    /// `embed_dim × (slots · 6)`
    pub e: Arc<Matrix>,
}

impl GeneratorParams {
    /// Draws `W` and `E` from `normal(0, 1/√d)` and sets `b = 0`.
    pub fn init(seed: u64, d: usize, slots: usize, embed_dim: usize) -> Result<Self> {
        if d < 2 || slots < 1 || embed_dim < 2 {
            return Err(Error::Config(format!(
                "generator sizes need d ≥ 2, K ≥ 1, embed_dim ≥ 2 (got {d}, {slots}, {embed_dim})"
            )));
        }
        let out_dim = slots * SLOT_FEATURES;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal =
            Normal::new(0.0, 1.0 / (d as f64).sqrt()).map_err(|e| Error::Config(e.to_string()))?;
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(&mut rng)).collect() };
        let w = Matrix::new(out_dim, d, draw(out_dim * d))?;
        let e = Matrix::new(embed_dim, out_dim, draw(embed_dim * out_dim))?;
        Ok(GeneratorParams {
            d,
            slots,
            embed_dim,
            w: Arc::new(w),
            b: Arc::new(vec![0.0; out_dim]),
            e: Arc::new(e),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.slots * SLOT_FEATURES
    }

    fn check(&self) -> Result<()> {
        let out = self.out_dim();
        let ok = self.w.rows() == out
            && self.w.cols() == self.d
            && self.b.len() == out
            && self.e.rows() == self.embed_dim
            && self.e.cols() == out;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "generator parameter shapes are inconsistent".into(),
            ))
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let params: GeneratorParams = serde_json::from_str(text)?;
        params.check()?;
        Ok(params)
    }
}

#[derive(Clone, Debug)]
pub enum Generator {
    Slots(GeneratorParams),
    /// Scene := ε.
    Identity {
        d: usize,
    },
}

impl Generator {
    pub fn dim(&self) -> usize {
        match self {
            Generator::Slots(p) => p.d,
            Generator::Identity { d } => *d,
        }
    }

    pub fn slots(&self) -> usize {
        match self {
            Generator::Slots(p) => p.slots,
            Generator::Identity { .. } => 0,
        }
    }

    /// Records the forward pass for the leaf `noise` on `tape`.
    pub fn generate(&self, tape: &mut Tape, noise: NodeId) -> Result<SceneGraph> {
        let d = tape.value(noise).len();
        if d != self.dim() {
            return Err(Error::Contract(format!(
                "noise has dimension {d}, generator expects {}",
                self.dim()
            )));
        }
        match self {
            Generator::Identity { .. } => Ok(SceneGraph {
                noise,
                presence: Vec::new(),
                color: Vec::new(),
                position: Vec::new(),
                presences: None,
                xs: None,
                ys: None,
                embedding: noise,
            }),
            Generator::Slots(params) => {
                let h = tape.affine(params.w.clone(), params.b.clone(), noise)?;
                let mut graph = SceneGraph {
                    noise,
                    presence: Vec::with_capacity(params.slots),
                    color: Vec::with_capacity(params.slots),
                    position: Vec::with_capacity(params.slots),
                    presences: None,
                    xs: None,
                    ys: None,
                    embedding: noise,
                };
                let mut features = Vec::with_capacity(params.slots * 3);
                for k in 0..params.slots {
                    let base = k * SLOT_FEATURES;
                    let hp = tape.slice(h, base, 1)?;
                    let hc = tape.slice(h, base + 1, 3)?;
                    let hx = tape.slice(h, base + 4, 2)?;
                    let p = tape.sigmoid(hp)?;
                    let c = tape.sigmoid(hc)?;
                    let x = tape.tanh(hx)?;
                    graph.presence.push(p);
                    graph.color.push(c);
                    graph.position.push(x);
                    features.extend([p, c, x]);
                }
                let feat = tape.concat(&features)?;
                let zero = Arc::new(vec![0.0; params.embed_dim]);
                let pooled = tape.affine(params.e.clone(), zero, feat)?;
                graph.embedding = tape.normalize(pooled)?;
                graph.collect_slot_vectors(tape)?;
                Ok(graph)
            }
        }
    }

    /// Evaluates the generator without keeping the tape.
    pub fn scene(&self, noise: &NoiseVector) -> Result<Scene> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(noise.0.clone());
        Ok(self.generate(&mut tape, leaf)?.scene(&tape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_gradient, max_scaled_error};

    fn slot_gen() -> Generator {
        Generator::Slots(GeneratorParams::init(0, 64, 4, 16).unwrap())
    }

    fn prompt(color: [f64; 3]) -> PromptSpec {
        let mut emb = vec![0.0; 16];
        emb[0] = 1.0;
        PromptSpec {
            objects: vec![PromptObject {
                target_color: color,
            }],
            relation: None,
            count_target: 1,
            target_embedding: emb,
            category: Category::Color,
        }
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let a = GeneratorParams::init(0, 64, 4, 16).unwrap();
        let b = GeneratorParams::init(0, 64, 4, 16).unwrap();
        assert_eq!(a, b);
        let c = GeneratorParams::init(1, 64, 4, 16).unwrap();
        assert_ne!(a.w, c.w);
        assert!(a.b.iter().all(|&v| v == 0.0));
        assert_eq!(a.w.rows(), 4 * SLOT_FEATURES);
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(matches!(
            GeneratorParams::init(0, 1, 4, 16),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            GeneratorParams::init(0, 8, 0, 16),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            GeneratorParams::init(0, 8, 2, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_noise_squashes_to_midpoints() {
        // E·features stays nonzero at ε = 0, so the embedding is defined.
        let scene = slot_gen().scene(&NoiseVector(vec![0.0; 64])).unwrap();
        for s in &scene.slots {
            assert_eq!(s.presence, 0.5);
            assert_eq!(s.color, [0.5; 3]);
            assert_eq!(s.position, [0.0; 2]);
        }
        assert!((norm(&scene.embedding) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prompt_does_not_change_slots() {
        // The generator takes no prompt; two prompts see the same scene.
        let gen = slot_gen();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eps = NoiseVector::sample(&mut rng, 64);
        let p1 = prompt([1.0, 0.0, 0.0]);
        let p2 = prompt([0.0, 0.0, 1.0]);
        p1.validate(4, 16).unwrap();
        p2.validate(4, 16).unwrap();
        assert_eq!(gen.scene(&eps).unwrap(), gen.scene(&eps).unwrap());
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let mut tape = Tape::new();
        let leaf = tape.leaf(vec![0.0; 3]);
        assert!(matches!(
            slot_gen().generate(&mut tape, leaf),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn ranges_hold_at_extreme_noise() {
        let gen = slot_gen();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let raw = NoiseVector::sample(&mut rng, 64);
            let scale = 1e3 / raw.norm();
            let eps = NoiseVector(raw.0.iter().map(|v| v * scale).collect());
            let scene = gen.scene(&eps).unwrap();
            for s in &scene.slots {
                assert!((0.0..=1.0).contains(&s.presence));
                assert!(s.color.iter().all(|c| (0.0..=1.0).contains(c)));
                assert!(s.position.iter().all(|x| (-1.0..=1.0).contains(x)));
            }
            assert!((norm(&scene.embedding) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn slot_coordinates_match_finite_differences() {
        let gen = slot_gen();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let eps = NoiseVector::sample(&mut rng, 64);
            let k = rng.random_range(0..4);
            let which = rng.random_range(0..SLOT_FEATURES + 1);
            let pick = |s: &Scene| match which {
                0 => s.slots[k].presence,
                1..=3 => s.slots[k].color[which - 1],
                4 | 5 => s.slots[k].position[which - 4],
                _ => s.embedding[k],
            };
            let mut tape = Tape::new();
            let leaf = tape.leaf(eps.0.clone());
            let g = gen.generate(&mut tape, leaf).unwrap();
            let node = match which {
                0 => g.presence[k],
                1..=3 => tape.slice(g.color[k], which - 1, 1).unwrap(),
                4 | 5 => tape.slice(g.position[k], which - 4, 1).unwrap(),
                _ => tape.slice(g.embedding, k, 1).unwrap(),
            };
            let grad = tape.backward(node, leaf).unwrap();
            let fd = finite_diff_gradient(
                |x| Ok(pick(&gen.scene(&NoiseVector(x.to_vec()))?)),
                &eps.0,
                1e-5,
            )
            .unwrap();
            assert!(max_scaled_error(&grad, &fd, 1e-5, 1e-8) <= 1e-5);
        }
    }

    #[test]
    fn sampled_noise_is_reproducible() {
        let a = NoiseVector::sample(&mut ChaCha8Rng::seed_from_u64(9), 64);
        let b = NoiseVector::sample(&mut ChaCha8Rng::seed_from_u64(9), 64);
        assert_eq!(a, b);
    }

    #[test]
    fn sampled_noise_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| NoiseVector::sample(&mut rng, 2).0[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        // Sample variance has sd ≈ √(2/n) ≈ 0.0045.
        assert!(
            (var - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt(),
            "var {var}"
        );
    }

    #[test]
    fn noise_norm_concentrates_near_sqrt_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 10_000;
        let mean = (0..n)
            .map(|_| NoiseVector::sample(&mut rng, 64).norm())
            .sum::<f64>()
            / n as f64;
        assert!((7.7..=8.1).contains(&mean), "mean norm {mean}");
    }

    #[test]
    fn params_json_round_trip() {
        let params = GeneratorParams::init(4, 8, 2, 3).unwrap();
        let text = params.to_json().unwrap();
        assert_eq!(GeneratorParams::from_json(&text).unwrap(), params);
    }

    #[test]
    fn identity_generator_passes_noise_through() {
        let gen = Generator::Identity { d: 3 };
        let scene = gen.scene(&NoiseVector(vec![1.0, -2.0, 0.5])).unwrap();
        assert!(scene.slots.is_empty());
        assert_eq!(scene.embedding, vec![1.0, -2.0, 0.5]);
        assert_eq!(scene.latent, scene.embedding);
    }
}
