//! Structured class descriptions, their fixed embeddings, and the pairwise
//! margins and weights the semantic loss reads. Used only at training time.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
    Circular,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionType {
    Swipe,
    Rotation,
    ShapeTracing,
    Tap,
    Hold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Stationary,
    Directional,
    Rotational,
    Shape,
    Tap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Complexity {
    Simple,
    Complex,
}

impl Direction {
    const ALL: [Self; 6] = [
        Self::Up,
        Self::Down,
        Self::Left,
        Self::Right,
        Self::Circular,
        Self::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Up => "up",
            Self::Down => "down",
            Self::Left => "left",
            Self::Right => "right",
            Self::Circular => "circular",
            Self::None => "none",
        }
    }

    fn adjective(self) -> Option<&'static str> {
        match self {
            Self::Up => Some("upward"),
            Self::Down => Some("downward"),
            Self::Left => Some("leftward"),
            Self::Right => Some("rightward"),
            Self::Circular => Some("circular"),
            Self::None => None,
        }
    }
}

impl MotionType {
    const ALL: [Self; 5] = [
        Self::Swipe,
        Self::Rotation,
        Self::ShapeTracing,
        Self::Tap,
        Self::Hold,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Swipe => "swipe",
            Self::Rotation => "rotation",
            Self::ShapeTracing => "shape-tracing",
            Self::Tap => "tap",
            Self::Hold => "hold",
        }
    }
}

impl Category {
    const ALL: [Self; 5] = [
        Self::Stationary,
        Self::Directional,
        Self::Rotational,
        Self::Shape,
        Self::Tap,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Stationary => "stationary",
            Self::Directional => "directional",
            Self::Rotational => "rotational",
            Self::Shape => "shape",
            Self::Tap => "tap",
        }
    }
}

impl Complexity {
    const ALL: [Self; 2] = [Self::Simple, Self::Complex];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Simple => "simple",
            Self::Complex => "complex",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GestureAttributes {
    pub direction: Direction,
    pub motion_type: MotionType,
    pub category: Category,
    pub complexity: Complexity,
}

impl GestureAttributes {
    pub fn new(direction: Direction, motion_type: MotionType, category: Category, complexity: Complexity) -> Self {
        Self {
            direction,
            motion_type,
            category,
            complexity,
        }
    }

    pub fn swipe(direction: Direction) -> Self {
        Self::new(direction, MotionType::Swipe, Category::Directional, Complexity::Simple)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GestureDescription {
    pub class_id: usize,
    #[serde(flatten)]
    pub attributes: GestureAttributes,
    pub rendered: String,
}

impl fmt::Display for GestureDescription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.rendered)
    }
}

fn article(word: &str) -> &'static str {
    if word.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

/// Instantiates "a <direction> <type> gesture with properties: primary type:
/// <category>, direction: <orientation>, complexity: <level>." A `none`
/// direction drops the leading adjective.
pub fn render_description(class_id: usize, attributes: GestureAttributes) -> GestureDescription {
    let a = attributes;
    let head = match a.direction.adjective() {
        Some(adj) => format!("{adj} {}", a.motion_type.as_str()),
        None => a.motion_type.as_str().to_string(),
    };
    let rendered = format!(
        "{} {head} gesture with properties: primary type: {}, direction: {}, complexity: {}.",
        article(&head),
        a.category.as_str(),
        a.direction.as_str(),
        a.complexity.as_str()
    );
    GestureDescription {
        class_id,
        attributes,
        rendered,
    }
}

/// On-disk form of precomputed sentence-encoder vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingFile {
    pub metadata: EmbeddingMetadata,
    /// Class id (as a decimal string) to vector.
    pub embeddings: BTreeMap<String, Vec<f32>>,
    #[serde(default)]
    pub descriptions: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMetadata {
    pub provider_id: String,
    pub dimension: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provider {
    /// Concatenated one-hot (category, direction, motion type, complexity).
    Structured,
    External(std::path::PathBuf),
}

pub const STRUCTURED_PROVIDER_ID: &str = "structured-onehot-v1";

fn normalize(v: &mut [f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::InvalidInput("embedding vector with zero or non-finite norm".into()));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(())
}

fn one_hot<T: PartialEq>(all: &[T], value: &T) -> impl Iterator<Item = f64> {
    let hit = all.iter().position(|v| v == value);
    (0..all.len()).map(move |i| if Some(i) == hit { 1.0 } else { 0.0 })
}

pub fn structured_embedding(a: &GestureAttributes) -> Vec<f64> {
    let mut v: Vec<f64> = one_hot(&Category::ALL, &a.category)
        .chain(one_hot(&Direction::ALL, &a.direction))
        .chain(one_hot(&MotionType::ALL, &a.motion_type))
        .chain(one_hot(&Complexity::ALL, &a.complexity))
        .collect();
    normalize(&mut v).expect("four active one-hot fields");
    v
}

/// L2-normalized vector per description, in description order.
pub fn embed_descriptions(descs: &[GestureDescription], provider: &Provider) -> Result<(String, Vec<Vec<f64>>)> {
    match provider {
        Provider::Structured => Ok((
            STRUCTURED_PROVIDER_ID.to_string(),
            descs.iter().map(|d| structured_embedding(&d.attributes)).collect(),
        )),
        Provider::External(path) => {
            let file = load_embedding_file(path)?;
            let vectors = descs
                .iter()
                .map(|d| {
                    let raw = file.embeddings.get(&d.class_id.to_string()).ok_or_else(|| {
                        Error::ProviderUnavailable(format!(
                            "{} has no vector for class {}",
                            path.display(),
                            d.class_id
                        ))
                    })?;
                    if raw.len() != file.metadata.dimension {
                        return Err(Error::ProviderUnavailable(format!(
                            "class {} vector has {} values, metadata says {}",
                            d.class_id,
                            raw.len(),
                            file.metadata.dimension
                        )));
                    }
                    let mut v: Vec<f64> = raw.iter().map(|&x| f64::from(x)).collect();
                    normalize(&mut v)?;
                    Ok(v)
                })
                .collect::<Result<_>>()?;
            Ok((file.metadata.provider_id, vectors))
        }
    }
}

pub fn load_embedding_file(path: &Path) -> Result<EmbeddingFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::ProviderUnavailable(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::ProviderUnavailable(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemanticConstants {
    pub m_min: f64,
    pub m_max: f64,
    pub w_max: f64,
}

impl Default for SemanticConstants {
    fn default() -> Self {
        Self {
            m_min: 0.2,
            m_max: 1.0,
            w_max: 1.0,
        }
    }
}

impl SemanticConstants {
    pub fn validate(&self) -> Result<()> {
        if self.m_min > self.m_max {
            return Err(Error::InvalidConfig(format!(
                "m_min {} exceeds m_max {}",
                self.m_min, self.m_max
            )));
        }
        if self.m_min < 0.0 || self.w_max < 0.0 {
            return Err(Error::InvalidConfig("margins and weights must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn margin(&self, d: f64) -> f64 {
        self.m_min + (self.m_max - self.m_min) * d / 2.0
    }

    pub fn weight(&self, d: f64) -> f64 {
        self.w_max * (1.0 - d / 2.0)
    }
}

/// Per-class embeddings with derived `[K × K]` distance, margin and weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTable {
    pub embeddings: Vec<Vec<f64>>,
    pub distance: Vec<Vec<f64>>,
    pub margin: Vec<Vec<f64>>,
    pub weight: Vec<Vec<f64>>,
    pub provider_id: String,
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (1.0 - dot).clamp(0.0, 2.0)
}

pub fn derive_margins_weights(
    embeddings: Vec<Vec<f64>>,
    provider_id: &str,
    constants: &SemanticConstants,
) -> Result<SemanticTable> {
    constants.validate()?;
    let k = embeddings.len();
    if k < 2 {
        return Err(Error::InvalidInput(format!("{k} classes, need at least 2")));
    }
    let mut distance = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let d = cosine_distance(&embeddings[i], &embeddings[j]);
            distance[i][j] = d;
            distance[j][i] = d;
        }
    }
    let margin = distance
        .iter()
        .map(|row| row.iter().map(|&d| constants.margin(d)).collect())
        .collect();
    let weight = distance
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, &d)| if i == j { 0.0 } else { constants.weight(d) })
                .collect()
        })
        .collect();
    Ok(SemanticTable {
        embeddings,
        distance,
        margin,
        weight,
        provider_id: provider_id.to_string(),
    })
}

impl SemanticTable {
    pub fn build(descs: &[GestureDescription], provider: &Provider, constants: &SemanticConstants) -> Result<Self> {
        let (id, vectors) = embed_descriptions(descs, provider)?;
        derive_margins_weights(vectors, &id, constants)
    }

    pub fn num_classes(&self) -> usize {
        self.embeddings.len()
    }

    /// Text-free table: every off-diagonal pair gets the margin and weight of
    /// the mean off-diagonal distance of `self`.
    pub fn uniform(&self, constants: &SemanticConstants) -> Self {
        let k = self.num_classes();
        let mean = self
            .distance
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().enumerate().filter(move |(j, _)| *j != i))
            .map(|(_, &d)| d)
            .sum::<f64>()
            / (k * (k - 1)) as f64;
        let off = |i: usize, j: usize, v: f64, diag: f64| if i == j { diag } else { v };
        let grid = |v: f64, diag: f64| {
            (0..k)
                .map(|i| (0..k).map(|j| off(i, j, v, diag)).collect())
                .collect::<Vec<Vec<f64>>>()
        };
        Self {
            embeddings: self.embeddings.clone(),
            distance: grid(mean, 0.0),
            margin: grid(constants.margin(mean), constants.m_min),
            weight: grid(constants.weight(mean), 0.0),
            provider_id: format!("uniform({})", self.provider_id),
        }
    }

    /// SHA-256 over the provider id and the distance, margin and weight
    /// matrices, as lowercase hex.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.provider_id.as_bytes());
        h.update((self.num_classes() as u64).to_le_bytes());
        for m in [&self.distance, &self.margin, &self.weight] {
            for v in m.iter().flatten() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn circle() -> GestureAttributes {
        GestureAttributes::new(Direction::Circular, MotionType::ShapeTracing, Category::Shape, Complexity::Complex)
    }

    #[test]
    fn renders_the_swipe_up_example() {
        let d = render_description(0, GestureAttributes::swipe(Direction::Up));
        assert_eq!(
            d.rendered,
            "an upward swipe gesture with properties: primary type: directional, direction: up, complexity: simple."
        );
        assert_eq!(d, render_description(0, GestureAttributes::swipe(Direction::Up)));
    }

    #[test]
    fn renders_circle_and_directionless_classes() {
        let d = render_description(3, circle());
        assert!(d.rendered.starts_with("a circular shape-tracing gesture"));
        assert!(d.rendered.contains("primary type: shape"));
        assert!(d.rendered.contains("direction: circular"));
        let tap = GestureAttributes::new(Direction::None, MotionType::Tap, Category::Tap, Complexity::Simple);
        assert_eq!(
            render_description(4, tap).rendered,
            "a tap gesture with properties: primary type: tap, direction: none, complexity: simple."
        );
    }

    #[test]
    fn structured_distances_follow_shared_attributes() {
        let up = structured_embedding(&GestureAttributes::swipe(Direction::Up));
        let down = structured_embedding(&GestureAttributes::swipe(Direction::Down));
        let c = structured_embedding(&circle());
        for v in [&up, &down, &c] {
            assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        }
        // Three of four fields shared: 1 - 3/4; none shared: 1.
        assert!((cosine_distance(&up, &down) - 0.25).abs() < 1e-12);
        assert!((cosine_distance(&up, &c) - 1.0).abs() < 1e-12);
        assert_eq!(cosine_distance(&up, &up), 0.0);
    }

    #[test]
    fn margin_and_weight_endpoints() {
        let c = SemanticConstants::default();
        let t = derive_margins_weights(vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0]], "t", &c).unwrap();
        assert_eq!((t.margin[0][1], t.weight[0][1]), (0.2, 1.0));
        assert_eq!(t.distance[0][2], 2.0);
        assert_eq!((t.margin[0][2], t.weight[0][2]), (1.0, 0.0));
        assert_eq!(t.weight[1][1], 0.0);
        let bad = SemanticConstants {
            m_min: 1.5,
            ..c
        };
        assert!(matches!(
            derive_margins_weights(vec![vec![1.0], vec![1.0]], "t", &bad),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn external_provider_reads_vectors_and_reports_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let missing = Provider::External(dir.path().join("none.json"));
        let descs = vec![render_description(0, GestureAttributes::swipe(Direction::Up))];
        assert!(matches!(
            embed_descriptions(&descs, &missing),
            Err(Error::ProviderUnavailable(_))
        ));
        let path = dir.path().join("emb.json");
        let file = EmbeddingFile {
            metadata: EmbeddingMetadata {
                provider_id: "minilm".into(),
                dimension: 2,
            },
            embeddings: [("0".to_string(), vec![3.0, 4.0])].into(),
            descriptions: [("0".to_string(), descs[0].rendered.clone())].into(),
        };
        std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        let (id, v) = embed_descriptions(&descs, &Provider::External(path)).unwrap();
        assert_eq!(id, "minilm");
        assert!((v[0][0] - 0.6).abs() < 1e-12 && (v[0][1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn uniform_table_is_flat_off_diagonal() {
        let descs: Vec<_> = [Direction::Up, Direction::Down, Direction::Left]
            .into_iter()
            .enumerate()
            .map(|(i, d)| render_description(i, GestureAttributes::swipe(d)))
            .chain([render_description(3, circle())])
            .collect();
        let c = SemanticConstants::default();
        let t = SemanticTable::build(&descs, &Provider::Structured, &c).unwrap();
        let u = t.uniform(&c);
        assert_eq!(u.margin[0][1], u.margin[2][3]);
        assert_eq!(u.weight[1][0], u.weight[3][0]);
        assert_eq!(u.weight[2][2], 0.0);
        assert_ne!(t.fingerprint(), u.fingerprint());
        assert_eq!(t.fingerprint(), SemanticTable::build(&descs, &Provider::Structured, &c).unwrap().fingerprint());
    }

    fn attrs() -> impl Strategy<Value = GestureAttributes> {
        (0..6usize, 0..5usize, 0..5usize, 0..2usize).prop_map(|(d, m, c, x)| {
            GestureAttributes::new(Direction::ALL[d], MotionType::ALL[m], Category::ALL[c], Complexity::ALL[x])
        })
    }

    fn shared(a: &GestureAttributes, b: &GestureAttributes) -> usize {
        usize::from(a.direction == b.direction)
            + usize::from(a.motion_type == b.motion_type)
            + usize::from(a.category == b.category)
            + usize::from(a.complexity == b.complexity)
    }

    proptest! {
        #[test]
        fn more_shared_attributes_never_farther(a in attrs(), b in attrs(), c in attrs()) {
            let (ea, eb, ec) = (structured_embedding(&a), structured_embedding(&b), structured_embedding(&c));
            if shared(&a, &b) > shared(&a, &c) {
                prop_assert!(cosine_distance(&ea, &eb) <= cosine_distance(&ea, &ec));
            }
        }

        #[test]
        fn margins_rise_and_weights_fall_with_distance(
            raw in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 4), 3..7)
        ) {
            let mut vecs = raw;
            for v in &mut vecs {
                v[0] += 1e-3;
                normalize(v).unwrap();
            }
            let t = derive_margins_weights(vecs, "p", &SemanticConstants::default()).unwrap();
            let k = t.num_classes();
            let mut pairs: Vec<(f64, f64, f64)> = (0..k)
                .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| (t.distance[i][j], t.margin[i][j], t.weight[i][j]))
                .collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in pairs.windows(2) {
                prop_assert!(w[0].1 <= w[1].1 + 1e-15);
                prop_assert!(w[0].2 >= w[1].2 - 1e-15);
            }
            for i in 0..k {
                prop_assert_eq!(t.distance[i][i], 0.0);
                for j in 0..k {
                    prop_assert_eq!(t.distance[i][j], t.distance[j][i]);
                }
            }
        }
    }
}
