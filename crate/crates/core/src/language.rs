//! Templated hints: generation from geometry, parsing back into word groups,
//! direction flips for augmentation, and learned word-group embeddings.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{ClassLabel, Instance};
use crate::nn::split_even;
use crate::tensor::{ParamId, ParamSet, Tape, Tensor, Var};

/// Targets closer than this to an instance centre are described as "on top".
pub const ON_TOP_RADIUS: f64 = 3.0;

/// Compass direction of the target relative to an instance (+x east, +y north).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    East,
    Northeast,
    North,
    Northwest,
    West,
    Southwest,
    South,
    Southeast,
    OnTop,
}

impl Direction {
    /// Counter-clockwise from east, then on-top.
    pub const ALL: [Direction; 9] = [
        Direction::East,
        Direction::Northeast,
        Direction::North,
        Direction::Northwest,
        Direction::West,
        Direction::Southwest,
        Direction::South,
        Direction::Southeast,
        Direction::OnTop,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Direction::East => "east",
            Direction::Northeast => "northeast",
            Direction::North => "north",
            Direction::Northwest => "northwest",
            Direction::West => "west",
            Direction::Southwest => "southwest",
            Direction::South => "south",
            Direction::Southeast => "southeast",
            Direction::OnTop => "on-top",
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.token() == s)
    }

    /// Sector of the displacement `(dx, dy)` from instance to target. Sector
    /// boundaries sit at odd multiples of 22.5°.
    pub fn from_offset(dx: f64, dy: f64) -> Self {
        if dx.hypot(dy) < ON_TOP_RADIUS {
            return Direction::OnTop;
        }
        let angle = dy.atan2(dx);
        let sector = (angle / std::f64::consts::FRAC_PI_4).round().rem_euclid(8.0) as usize;
        Self::ALL[sector]
    }

    /// Unit vector pointing from the instance towards the target.
    pub fn unit(self) -> [f64; 2] {
        match self {
            Direction::OnTop => [0.0, 0.0],
            d => {
                let k = Self::ALL.iter().position(|x| *x == d).unwrap() as f64;
                let a = k * std::f64::consts::FRAC_PI_4;
                [a.cos(), a.sin()]
            }
        }
    }

    pub fn flip(self, axis: Axis) -> Self {
        use Direction::*;
        match (axis, self) {
            (Axis::X, East) => West,
            (Axis::X, West) => East,
            (Axis::X, Northeast) => Northwest,
            (Axis::X, Northwest) => Northeast,
            (Axis::X, Southeast) => Southwest,
            (Axis::X, Southwest) => Southeast,
            (Axis::Y, North) => South,
            (Axis::Y, South) => North,
            (Axis::Y, Northeast) => Southeast,
            (Axis::Y, Southeast) => Northeast,
            (Axis::Y, Northwest) => Southwest,
            (Axis::Y, Southwest) => Northwest,
            (_, d) => d,
        }
    }
}

/// Mirror axis: `X` negates x coordinates, `Y` negates y coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// Named colour palette used for hint colour words.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Color {
    DarkGreen,
    Gray,
    Red,
    Beige,
    Black,
    White,
    Blue,
    Yellow,
    Green,
    Brown,
}

impl Color {
    pub const ALL: [Color; 10] = [
        Color::DarkGreen,
        Color::Gray,
        Color::Red,
        Color::Beige,
        Color::Black,
        Color::White,
        Color::Blue,
        Color::Yellow,
        Color::Green,
        Color::Brown,
    ];

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::DarkGreen => [0.0, 0.4, 0.0],
            Color::Gray => [0.5, 0.5, 0.5],
            Color::Red => [0.8, 0.1, 0.1],
            Color::Beige => [0.9, 0.85, 0.7],
            Color::Black => [0.08, 0.08, 0.08],
            Color::White => [0.95, 0.95, 0.95],
            Color::Blue => [0.1, 0.2, 0.8],
            Color::Yellow => [0.95, 0.85, 0.1],
            Color::Green => [0.3, 0.85, 0.3],
            Color::Brown => [0.45, 0.28, 0.1],
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Color::DarkGreen => "dark-green",
            Color::Gray => "gray",
            Color::Red => "red",
            Color::Beige => "beige",
            Color::Black => "black",
            Color::White => "white",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Green => "green",
            Color::Brown => "brown",
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.token() == s)
    }

    /// Palette entry closest to `rgb` in Euclidean distance (first wins ties).
    pub fn nearest(rgb: [f64; 3]) -> Self {
        let dist = |c: Color| {
            let p = c.rgb();
            (0..3).map(|k| (p[k] - rgb[k]).powi(2)).sum::<f64>()
        };
        Self::ALL
            .into_iter()
            .fold((Color::DarkGreen, f64::INFINITY), |best, c| {
                let d = dist(c);
                if d < best.1 {
                    (c, d)
                } else {
                    best
                }
            })
            .0
    }
}

/// The three word groups a hint is made of.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordGroups {
    pub direction: Vec<String>,
    pub color: Vec<String>,
    pub class: Vec<String>,
}

impl WordGroups {
    pub fn single(direction: Direction, color: Color, class: ClassLabel) -> Self {
        Self {
            direction: vec![direction.token().into()],
            color: vec![color.token().into()],
            class: vec![class.token().into()],
        }
    }
}

/// Persisted as `{"text", "instance_id"}`; the word groups are re-parsed on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HintRecord", into = "HintRecord")]
pub struct Hint {
    pub text: String,
    pub groups: WordGroups,
    pub referred_instance_id: usize,
}

#[derive(Serialize, Deserialize)]
struct HintRecord {
    text: String,
    instance_id: usize,
}

impl TryFrom<HintRecord> for Hint {
    type Error = Error;
    fn try_from(r: HintRecord) -> Result<Self> {
        Ok(Hint {
            groups: parse_hint(&r.text)?,
            text: r.text,
            referred_instance_id: r.instance_id,
        })
    }
}

impl From<Hint> for HintRecord {
    fn from(h: Hint) -> Self {
        HintRecord {
            text: h.text,
            instance_id: h.referred_instance_id,
        }
    }
}

impl Hint {
    pub fn direction(&self) -> Option<Direction> {
        self.groups.direction.first().and_then(|t| Direction::from_token(t))
    }
}

impl fmt::Display for Hint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

const PREFIX: &str = "The pose is ";
const ON_TOP_PHRASE: &str = "on top of a ";
const OF_A: &str = " of a ";

/// Renders the hint sentence for the given word groups.
pub fn render(groups: &WordGroups) -> String {
    let color = groups.color.join(" ");
    let class = groups.class.join(" ");
    if groups.direction.len() == 1 && groups.direction[0] == Direction::OnTop.token() {
        format!("{PREFIX}{ON_TOP_PHRASE}{color} {class}.")
    } else {
        format!("{PREFIX}{} of a {color} {class}.", groups.direction.join(" "))
    }
}

/// Describes `target` relative to `instance`.
pub fn generate_hint(target: [f64; 2], instance: &Instance) -> Result<Hint> {
    let c = instance.center();
    let (dx, dy) = (target[0] - c[0], target[1] - c[1]);
    if dx == 0.0 && dy == 0.0 {
        return Err(Error::InvalidInput(format!(
            "target coincides with the centre of instance {}",
            instance.id
        )));
    }
    let groups = WordGroups::single(
        Direction::from_offset(dx, dy),
        Color::nearest(instance.avg_color()),
        instance.class,
    );
    Ok(Hint {
        text: render(&groups),
        groups,
        referred_instance_id: instance.id,
    })
}

/// Extracts the direction, colour and class word groups from a templated hint.
pub fn parse_hint(text: &str) -> Result<WordGroups> {
    let fail = |segment: &str| Error::Parse {
        text: text.to_string(),
        segment: segment.to_string(),
    };
    let rest = text.strip_prefix(PREFIX).ok_or_else(|| fail(text))?;
    let (direction, rest) = if let Some(r) = rest.strip_prefix(ON_TOP_PHRASE) {
        (vec![Direction::OnTop.token().to_string()], r)
    } else {
        let (dir, r) = rest.split_once(OF_A).ok_or_else(|| fail(rest))?;
        let words: Vec<String> = dir.split_whitespace().map(str::to_string).collect();
        if words.is_empty() {
            return Err(fail(dir));
        }
        if let Some(bad) = words.iter().find(|w| Direction::from_token(w).is_none() || *w == "on-top") {
            return Err(fail(bad));
        }
        (words, r)
    };
    let body = rest.strip_suffix('.').ok_or_else(|| fail(rest))?;
    let mut color = Vec::new();
    let mut class = Vec::new();
    for word in body.split_whitespace() {
        if class.is_empty() && Color::from_token(word).is_some() {
            color.push(word.to_string());
        } else if ClassLabel::from_token(word).is_some() {
            class.push(word.to_string());
        } else {
            return Err(fail(word));
        }
    }
    if color.is_empty() || class.is_empty() {
        return Err(fail(body));
    }
    Ok(WordGroups {
        direction,
        color,
        class,
    })
}

/// Mirrors the direction words of a hint and re-renders its text.
pub fn flip_hint(hint: &Hint, axis: Axis) -> Hint {
    let mut groups = hint.groups.clone();
    for w in &mut groups.direction {
        if let Some(d) = Direction::from_token(w) {
            *w = d.flip(axis).token().to_string();
        }
    }
    Hint {
        text: render(&groups),
        groups,
        referred_instance_id: hint.referred_instance_id,
    }
}

/// Dense token index over the template language.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in tokens {
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    /// Every direction, colour and class token of the hint templates.
    pub fn template() -> Self {
        let dirs = Direction::ALL.iter().map(|d| d.token().to_string());
        let colors = Color::ALL.iter().map(|c| c.token().to_string());
        let classes = ClassLabel::ALL.iter().map(|c| c.token().to_string());
        Self::from_tokens(dirs.chain(colors).chain(classes))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Vocabulary(token.to_string()))
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Learned word embeddings: a hint becomes the concatenation of the mean
/// embedding of each of its three word groups. The groups share one table;
/// when the hint width is not a multiple of 3 the later groups use a prefix
/// of the table columns.
#[derive(Clone, Debug)]
pub struct HintEmbedder {
    pub vocab: Vocabulary,
    pub table: ParamId,
    /// Widths of the direction, colour and class slots.
    pub group_widths: [usize; 3],
}

impl HintEmbedder {
    /// `width` is the full hint width, at least 3.
    pub fn new(prefix: &str, width: usize, params: &mut ParamSet, rng: &mut impl Rng) -> Result<Self> {
        if width < 3 {
            return Err(Error::Config(format!("hint width {width} must be at least 3")));
        }
        let w = split_even(width, 3);
        let group_widths = [w[0], w[1], w[2]];
        let vocab = Vocabulary::template();
        let data = (0..vocab.len() * w[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let table = params.add(
            format!("{prefix}.word_embeddings"),
            Tensor::new(vec![vocab.len(), w[0]], data)?,
        );
        Ok(Self {
            vocab,
            table,
            group_widths,
        })
    }

    fn indices(&self, words: &[String]) -> Result<Vec<usize>> {
        if words.is_empty() {
            return Err(Error::InvalidInput("empty word group".into()));
        }
        words.iter().map(|w| self.vocab.get(w)).collect()
    }

    /// Embeds hints into an `[n × width]` matrix.
    pub fn encode(&self, tape: &mut Tape, p: &[Var], hints: &[&WordGroups]) -> Result<Var> {
        let mut dir = Vec::with_capacity(hints.len());
        let mut col = Vec::with_capacity(hints.len());
        let mut cls = Vec::with_capacity(hints.len());
        for h in hints {
            dir.push(self.indices(&h.direction)?);
            col.push(self.indices(&h.color)?);
            cls.push(self.indices(&h.class)?);
        }
        let table = p[self.table.0];
        let full = self.group_widths[0];
        let mut slots = Vec::with_capacity(3);
        for (idx, &w) in [dir, col, cls].iter().zip(&self.group_widths) {
            let m = tape.gather_mean(table, idx)?;
            slots.push(if w == full { m } else { tape.slice_cols(m, 0, w)? });
        }
        Ok(tape.concat_cols(&slots)?)
    }
}

/// Embeds a single hint into a `[width]` vector.
pub fn encode_hint(tape: &mut Tape, p: &[Var], groups: &WordGroups, embedder: &HintEmbedder) -> Result<Var> {
    let m = embedder.encode(tape, p, &[groups])?;
    let w = tape.value(m).cols();
    Ok(tape.reshape(m, vec![w])?)
}

/// Shuffles hint order in place.
pub fn shuffle_hints<T>(hints: &mut [T], rng: &mut impl Rng) {
    use rand::seq::SliceRandom;
    hints.shuffle(rng);
}
