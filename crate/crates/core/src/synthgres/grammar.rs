//! Closed vocabulary and the expression templates built from it.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::scene::{Scene, Size};

pub const SHAPES: [(&str, &str); 12] = [
    ("circle", "circles"),
    ("square", "squares"),
    ("triangle", "triangles"),
    ("hexagon", "hexagons"),
    ("star", "stars"),
    ("diamond", "diamonds"),
    ("cross", "crosses"),
    ("ring", "rings"),
    ("heart", "hearts"),
    ("arrow", "arrows"),
    ("moon", "moons"),
    ("pentagon", "pentagons"),
];
pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];
pub const SIZES: [&str; 2] = ["small", "large"];
pub const DIRECTIONS: [&str; 4] = ["leftmost", "rightmost", "topmost", "bottommost"];
pub const NUMBERS: [&str; 6] = ["one", "two", "three", "four", "five", "six"];
const FUNCTION_WORDS: [&str; 3] = ["the", "all", "and"];

/// Token id ↔ string manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// The full grammar vocabulary, independent of how many categories a dataset uses.
    pub fn grammar() -> Self {
        let mut t: Vec<String> = FUNCTION_WORDS.iter().map(|s| s.to_string()).collect();
        for (s, p) in SHAPES {
            t.push(s.into());
            t.push(p.into());
        }
        t.extend(COLORS.iter().chain(&SIZES).chain(&DIRECTIONS).chain(&NUMBERS).map(|s| s.to_string()));
        Self::new(t).expect("grammar words are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index.get(word).copied().ok_or_else(|| Error::Input(format!("word {word:?} not in vocabulary")))
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.tokens.get(id).map(String::as_str).ok_or(Error::Vocabulary(id))
    }

    pub fn encode(&self, words: &[String]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter().map(|&i| self.word(i).map(str::to_string)).collect()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: Vocab = serde_json::from_str(s)?;
        Self::new(raw.tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Category,
    Count,
    Attribute,
    Spatial,
    Compound,
    Deceptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Left,
    Right,
    Top,
    Bottom,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Top, Direction::Bottom];

    fn word(self) -> &'static str {
        DIRECTIONS[self as usize]
    }
}

/// A referring expression as a selector over scene instances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expression {
    /// "all circles"
    Category { cat: usize },
    /// "two squares"
    Count { cat: usize, n: usize },
    /// "the red triangle", "the small blue star", "all red circles"
    Attribute { cat: usize, color: Option<usize>, size: Option<Size>, all: bool },
    /// "the leftmost circle"
    Spatial { cat: usize, dir: Direction },
    /// "all circles and squares"
    Compound { a: usize, b: usize },
}

impl Expression {
    pub fn words(&self) -> Vec<String> {
        let mut w: Vec<&str> = Vec::new();
        match *self {
            Self::Category { cat } => w.extend(["all", SHAPES[cat].1]),
            Self::Count { cat, n } => w.extend([NUMBERS[n - 1], if n == 1 { SHAPES[cat].0 } else { SHAPES[cat].1 }]),
            Self::Attribute { cat, color, size, all } => {
                w.push(if all { "all" } else { "the" });
                if let Some(s) = size {
                    w.push(SIZES[s as usize]);
                }
                if let Some(c) = color {
                    w.push(COLORS[c]);
                }
                w.push(if all { SHAPES[cat].1 } else { SHAPES[cat].0 });
            }
            Self::Spatial { cat, dir } => w.extend(["the", dir.word(), SHAPES[cat].0]),
            Self::Compound { a, b } => w.extend(["all", SHAPES[a].1, "and", SHAPES[b].1]),
        }
        w.into_iter().map(str::to_string).collect()
    }

    pub fn text(&self) -> String {
        self.words().join(" ")
    }

    pub fn kind(&self) -> TemplateKind {
        match self {
            Self::Category { .. } => TemplateKind::Category,
            Self::Count { .. } => TemplateKind::Count,
            Self::Attribute { .. } => TemplateKind::Attribute,
            Self::Spatial { .. } => TemplateKind::Spatial,
            Self::Compound { .. } => TemplateKind::Compound,
        }
    }

    /// Referred instance indices, or `None` when the expression is ill-posed for the scene
    /// (a definite article with several matches, a wrong number, a compound with a missing part).
    pub fn select(&self, scene: &Scene) -> Option<Vec<usize>> {
        let of_cat = |c: usize| -> Vec<usize> { (0..scene.instances.len()).filter(|&i| scene.instances[i].category == c).collect() };
        match *self {
            Self::Category { cat } => Some(of_cat(cat)),
            Self::Count { cat, n } => {
                let m = of_cat(cat);
                (m.len() == n).then_some(m)
            }
            Self::Attribute { cat, color, size, all } => {
                let m: Vec<usize> = of_cat(cat)
                    .into_iter()
                    .filter(|&i| color.is_none_or(|c| scene.instances[i].color == c) && size.is_none_or(|s| scene.instances[i].size == s))
                    .collect();
                (all || m.len() <= 1).then_some(m)
            }
            Self::Spatial { cat, dir } => {
                let m = of_cat(cat);
                if m.is_empty() {
                    return Some(m);
                }
                if m.len() < 2 {
                    return None;
                }
                let key = |i: usize| -> f64 {
                    let (cy, cx) = scene.instances[i].center();
                    match dir {
                        Direction::Left => cx,
                        Direction::Right => -cx,
                        Direction::Top => cy,
                        Direction::Bottom => -cy,
                    }
                };
                let best = m.iter().map(|&i| key(i)).fold(f64::INFINITY, f64::min);
                let winners: Vec<usize> = m.into_iter().filter(|&i| key(i) == best).collect();
                (winners.len() == 1).then_some(winners)
            }
            Self::Compound { a, b } => {
                let (ma, mb) = (of_cat(a), of_cat(b));
                if a == b || ma.is_empty() || mb.is_empty() {
                    return None;
                }
                let mut all = ma;
                all.extend(mb);
                all.sort_unstable();
                Some(all)
            }
        }
    }

    /// Every expression the grammar can form over `n_categories` categories and `n_colors` colors.
    pub fn enumerate(n_categories: usize, n_colors: usize) -> Vec<Self> {
        let mut out = Vec::new();
        for cat in 0..n_categories {
            out.push(Self::Category { cat });
            for n in 1..=NUMBERS.len() {
                out.push(Self::Count { cat, n });
            }
            for all in [false, true] {
                for color in std::iter::once(None).chain((0..n_colors).map(Some)) {
                    for size in [None, Some(Size::Small), Some(Size::Large)] {
                        if color.is_some() || size.is_some() {
                            out.push(Self::Attribute { cat, color, size, all });
                        }
                    }
                }
            }
            for dir in Direction::ALL {
                out.push(Self::Spatial { cat, dir });
            }
            for b in cat + 1..n_categories {
                out.push(Self::Compound { a: cat, b });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar_vocab_is_closed_and_small() {
        let v = Vocab::grammar();
        assert!(v.len() >= 40 && v.len() <= 64, "{}", v.len());
        for e in Expression::enumerate(12, COLORS.len()) {
            let ids = v.encode(&e.words()).unwrap();
            assert!(ids.len() <= 20);
            assert_eq!(v.decode(&ids).unwrap(), e.words());
        }
    }

    #[test]
    fn vocab_json_round_trip() {
        let v = Vocab::grammar();
        let back = Vocab::from_json(&serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(back.id("circles").unwrap(), v.id("circles").unwrap());
        assert!(Vocab::from_json(r#"{"tokens":["a","a"]}"#).is_err());
    }

    #[test]
    fn texts() {
        assert_eq!(Expression::Category { cat: 0 }.text(), "all circles");
        assert_eq!(Expression::Count { cat: 1, n: 2 }.text(), "two squares");
        assert_eq!(Expression::Attribute { cat: 2, color: Some(0), size: None, all: false }.text(), "the red triangle");
        assert_eq!(Expression::Spatial { cat: 0, dir: Direction::Left }.text(), "the leftmost circle");
        assert_eq!(Expression::Compound { a: 0, b: 1 }.text(), "all circles and squares");
    }
}
