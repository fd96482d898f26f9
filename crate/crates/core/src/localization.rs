//! Adaptive person localization.
//!
//! The slice of self-attention from every video token onto the reference
//! frame's tokens is averaged over each subject's reference mask. Every
//! video token is assigned to the subject it attends to most, and person
//! tokens get a label min–max normalized into that person's range.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::lrope::LabelVector;
use crate::numerics::Matrix;

/// Subject a token belongs to. Declaration order is the column order of
/// [`SubjectSimilarity`] and the tie-break order of [`categorize`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Person1,
    Person2,
    Background,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Person1, Category::Person2, Category::Background];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn person(index: usize) -> Option<Category> {
        match index {
            0 => Some(Category::Person1),
            1 => Some(Category::Person2),
            _ => None,
        }
    }

    fn grid_char(self) -> char {
        match self {
            Category::Person1 => '1',
            Category::Person2 => '2',
            Category::Background => 'b',
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Person1 => "person1",
            Category::Person2 => "person2",
            Category::Background => "background",
        })
    }
}

/// Reference-frame segmentation into person 1, person 2 and background.
/// Stored as one category per cell, so the three masks always partition
/// the grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubjectMaskSet {
    h: usize,
    w: usize,
    cells: Vec<Category>,
}

impl SubjectMaskSet {
    pub fn from_cells(h: usize, w: usize, cells: Vec<Category>) -> Result<Self> {
        if h == 0 || w == 0 || cells.len() != h * w {
            return config_err(format!("{} mask cells for a {h}x{w} grid", cells.len()));
        }
        Ok(Self { h, w, cells })
    }

    /// Builds the set from three boolean masks, which must be disjoint and
    /// cover every cell.
    pub fn from_masks(h: usize, w: usize, p1: &[bool], p2: &[bool], bg: &[bool]) -> Result<Self> {
        let n = h * w;
        if p1.len() != n || p2.len() != n || bg.len() != n {
            return config_err("mask sizes do not match the grid");
        }
        let cells = (0..n)
            .map(|i| match (p1[i], p2[i], bg[i]) {
                (true, false, false) => Ok(Category::Person1),
                (false, true, false) => Ok(Category::Person2),
                (false, false, true) => Ok(Category::Background),
                (false, false, false) => config_err(format!("cell {i} belongs to no subject")),
                _ => config_err(format!("cell {i} belongs to more than one subject")),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_cells(h, w, cells)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn cells(&self) -> &[Category] {
        &self.cells
    }

    pub fn mask(&self, c: Category) -> Vec<bool> {
        self.cells.iter().map(|&x| x == c).collect()
    }

    pub fn count(&self, c: Category) -> usize {
        self.cells.iter().filter(|&&x| x == c).count()
    }

    /// Text grid: `"h w"`, then `h` lines of `w` characters from `{1, 2, b}`.
    pub fn to_grid_text(&self) -> String {
        let mut s = format!("{} {}\n", self.h, self.w);
        for row in self.cells.chunks(self.w) {
            s.extend(row.iter().map(|c| c.grid_char()));
            s.push('\n');
        }
        s
    }
}

impl FromStr for SubjectMaskSet {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty mask file".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad mask header {header:?}"))))
            .collect::<Result<_>>()?;
        let [h, w] = dims[..] else {
            return Err(Error::Parse(format!("mask header must be \"h w\", got {header:?}")));
        };
        let mut cells = Vec::with_capacity(h * w);
        for r in 0..h {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("mask grid has {r} rows, expected {h}")))?
                .trim();
            if line.chars().count() != w {
                return Err(Error::Parse(format!("mask row {r} has {} cells, expected {w}", line.chars().count())));
            }
            for ch in line.chars() {
                cells.push(match ch {
                    '1' => Category::Person1,
                    '2' => Category::Person2,
                    'b' => Category::Background,
                    other => return Err(Error::Parse(format!("unknown mask cell {other:?} in row {r}"))),
                });
            }
        }
        if lines.next().is_some() {
            return Err(Error::Parse(format!("mask grid has more than {h} rows")));
        }
        Self::from_cells(h, w, cells)
    }
}

/// Attention from all `f·h·w` video tokens onto the `h·w` reference tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct RefToVideoAttentionMap {
    a: Matrix,
    f: usize,
    h: usize,
    w: usize,
}

impl RefToVideoAttentionMap {
    pub fn new(a: Matrix, f: usize, h: usize, w: usize) -> Result<Self> {
        if f == 0 || h == 0 || w == 0 {
            return config_err("attention map dims must be positive");
        }
        if a.shape() != (f * h * w, h * w) {
            return config_err(format!("attention map is {:?}, expected {:?}", a.shape(), (f * h * w, h * w)));
        }
        if a.as_slice().iter().any(|&v| v < 0.0) {
            return config_err("attention map entries must be non-negative");
        }
        Ok(Self { a, f, h, w })
    }

    /// Infers `f` from a matrix whose columns match an `h × w` reference grid.
    pub fn from_matrix(a: Matrix, h: usize, w: usize) -> Result<Self> {
        let hw = h * w;
        if hw == 0 || a.cols() != hw || !a.rows().is_multiple_of(hw) || a.rows() == 0 {
            return config_err(format!("attention map {:?} does not fit a {h}x{w} reference grid", a.shape()));
        }
        Self::new(a.clone(), a.rows() / hw, h, w)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.a
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.f, self.h, self.w)
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(self.a.scale(s), self.f, self.h, self.w)
    }
}

/// `(f·h·w) × 3` average reference-attention mass per subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectSimilarity(Matrix);

impl SubjectSimilarity {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.cols() != 3 || m.as_slice().iter().any(|&v| v < 0.0) {
            return config_err("subject similarity must be a non-negative N x 3 matrix");
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn tokens(&self) -> usize {
        self.0.rows()
    }
}

/// Label ranges per person, the background label and the per-stream audio labels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRangeConfig {
    pub person1: (f64, f64),
    pub person2: (f64, f64),
    pub background: f64,
    pub audio: (f64, f64),
}

impl Default for LabelRangeConfig {
    fn default() -> Self {
        Self::variant_b()
    }
}

impl LabelRangeConfig {
    /// Narrow adjacent ranges: 0–2 and 2–4, audio labels 1 and 3.
    pub fn variant_a() -> Self {
        Self {
            person1: (0.0, 2.0),
            person2: (2.0, 4.0),
            background: 12.0,
            audio: (1.0, 3.0),
        }
    }

    /// Default assignment: 0–4 and 20–24, background 12, audio labels 2 and 22.
    pub fn variant_b() -> Self {
        Self {
            person1: (0.0, 4.0),
            person2: (20.0, 24.0),
            background: 12.0,
            audio: (2.0, 22.0),
        }
    }

    pub fn range(&self, person: Category) -> Option<(f64, f64)> {
        match person {
            Category::Person1 => Some(self.person1),
            Category::Person2 => Some(self.person2),
            Category::Background => None,
        }
    }

    /// Ranges may touch at an endpoint but must not overlap.
    pub fn validate(&self) -> Result<()> {
        let all = [self.person1.0, self.person1.1, self.person2.0, self.person2.1, self.background, self.audio.0, self.audio.1];
        if all.iter().any(|v| !v.is_finite()) {
            return config_err("label config values must be finite");
        }
        for (name, (a, b)) in [("person1", self.person1), ("person2", self.person2)] {
            if a >= b {
                return config_err(format!("{name} range ({a}, {b}) must have a < b"));
            }
        }
        let (p1, p2) = (self.person1, self.person2);
        if p1.1 > p2.0 && p2.1 > p1.0 {
            return config_err(format!("person ranges {p1:?} and {p2:?} overlap"));
        }
        let inside = |x: f64, (a, b): (f64, f64)| a <= x && x <= b;
        if inside(self.background, p1) || inside(self.background, p2) {
            return config_err(format!("background label {} lies inside a person range", self.background));
        }
        if !inside(self.audio.0, p1) || !inside(self.audio.1, p2) {
            return config_err(format!("audio labels {:?} must lie inside their person ranges", self.audio));
        }
        Ok(())
    }
}

/// Per-token labels and categories for the whole latent video.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLabelMap {
    pub labels: LabelVector,
    pub categories: Vec<Category>,
}

impl TokenLabelMap {
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    /// Checks range confinement against `cfg`.
    pub fn validate(&self, cfg: &LabelRangeConfig) -> Result<()> {
        if self.labels.len() != self.categories.len() {
            return config_err("label and category counts differ");
        }
        for (i, (&l, &c)) in self.labels.as_slice().iter().zip(&self.categories).enumerate() {
            let ok = match cfg.range(c) {
                Some((a, b)) => a <= l && l <= b,
                None => l == cfg.background,
            };
            if !ok {
                return config_err(format!("token {i} ({c}) has out-of-range label {l}"));
            }
        }
        Ok(())
    }

    /// One line per token: `index frame row col category label`.
    pub fn to_text(&self, f: usize, h: usize, w: usize) -> Result<String> {
        if f * h * w != self.len() {
            return config_err(format!("{} tokens do not fill a {f}x{h}x{w} grid", self.len()));
        }
        let mut s = format!("# token-label-map v1 f={f} h={h} w={w}\n# index frame row col category label\n");
        for (i, (&l, c)) in self.labels.as_slice().iter().zip(&self.categories).enumerate() {
            let (frame, rem) = (i / (h * w), i % (h * w));
            writeln!(s, "{i} {frame} {} {} {c} {l}", rem / w, rem % w).unwrap();
        }
        Ok(s)
    }
}

/// `S[i, j]` = mean of `A[i, r]` over reference tokens `r` in subject `j`'s mask.
pub fn subject_similarity(a: &RefToVideoAttentionMap, masks: &SubjectMaskSet) -> Result<SubjectSimilarity> {
    let (_, h, w) = a.dims();
    if (masks.height(), masks.width()) != (h, w) {
        return config_err(format!(
            "mask grid {}x{} does not match attention reference grid {h}x{w}",
            masks.height(),
            masks.width()
        ));
    }
    let counts = Category::ALL.map(|c| masks.count(c));
    for c in Category::ALL {
        if counts[c.index()] == 0 {
            return config_err(format!("{c} mask is empty"));
        }
    }
    let m = a.matrix();
    let mut s = Matrix::zeros(m.rows(), 3);
    for i in 0..m.rows() {
        let mut sums = [0.0; 3];
        for (&v, &c) in m.row(i).iter().zip(masks.cells()) {
            sums[c.index()] += v;
        }
        for j in 0..3 {
            s[(i, j)] = sums[j] / counts[j] as f64;
        }
    }
    SubjectSimilarity::new(s)
}

/// Row-wise argmax; ties go to the lowest column.
pub fn categorize(s: &SubjectSimilarity) -> Vec<Category> {
    let m = s.matrix();
    (0..m.rows())
        .map(|i| {
            let row = m.row(i);
            let mut best = 0;
            for j in 1..3 {
                if row[j] > row[best] {
                    best = j;
                }
            }
            Category::ALL[best]
        })
        .collect()
}

/// Min–max normalizes each person's similarity column over that person's
/// tokens into its label range; a constant column maps to the midpoint.
pub fn normalize_labels(s: &SubjectSimilarity, categories: &[Category], cfg: &LabelRangeConfig) -> Result<TokenLabelMap> {
    cfg.validate()?;
    if categories.len() != s.tokens() {
        return config_err(format!("{} categories for {} tokens", categories.len(), s.tokens()));
    }
    let m = s.matrix();
    let mut labels = vec![cfg.background; categories.len()];
    for person in [Category::Person1, Category::Person2] {
        let (a, b) = cfg.range(person).expect("person has a range");
        let j = person.index();
        let members: Vec<usize> = (0..categories.len()).filter(|&i| categories[i] == person).collect();
        let (lo, hi) = members
            .iter()
            .map(|&i| m[(i, j)])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        for &i in &members {
            labels[i] = if hi > lo {
                ((m[(i, j)] - lo) / (hi - lo) * (b - a) + a).clamp(a, b)
            } else {
                0.5 * (a + b)
            };
        }
    }
    Ok(TokenLabelMap {
        labels: LabelVector::new(labels)?,
        categories: categories.to_vec(),
    })
}

/// Similarity, then categories, then normalized labels.
pub fn build_label_map(
    a: &RefToVideoAttentionMap,
    masks: &SubjectMaskSet,
    cfg: &LabelRangeConfig,
) -> Result<TokenLabelMap> {
    let s = subject_similarity(a, masks)?;
    let categories = categorize(&s);
    let map = normalize_labels(&s, &categories, cfg)?;
    map.validate(cfg)?;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn masks_2x3() -> SubjectMaskSet {
        "2 3\n11b\n22b\n".parse().unwrap()
    }

    fn sim(rows: &[[f64; 3]]) -> SubjectSimilarity {
        SubjectSimilarity::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn grid_parsing() {
        let m = masks_2x3();
        assert_eq!(m.count(Category::Person1), 2);
        assert_eq!(m.count(Category::Background), 2);
        assert_eq!(m.to_grid_text(), "2 3\n11b\n22b\n");
        assert!("2 3\n11b\n".parse::<SubjectMaskSet>().is_err());
        assert!("2 3\n11x\n22b\n".parse::<SubjectMaskSet>().is_err());
        assert!("2 3\n11\n22b\n".parse::<SubjectMaskSet>().is_err());
        assert!("2\n11\n".parse::<SubjectMaskSet>().is_err());
    }

    #[test]
    fn from_masks_requires_partition() {
        let t = [true, false];
        let f = [false, true];
        assert!(SubjectMaskSet::from_masks(1, 2, &t, &f, &[false, false]).is_ok());
        assert!(SubjectMaskSet::from_masks(1, 2, &t, &t, &f).is_err());
        assert!(SubjectMaskSet::from_masks(1, 2, &t, &[false, false], &[false, false]).is_err());
    }

    #[test]
    fn constant_map_gives_constant_similarity() {
        let a = RefToVideoAttentionMap::new(Matrix::filled(12, 6, 0.3), 2, 2, 3).unwrap();
        let s = subject_similarity(&a, &masks_2x3()).unwrap();
        assert!(s.matrix().as_slice().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn one_hot_rows_give_inverse_mask_size() {
        // Every token puts all its mass on reference cell 0 (person 1).
        let a = RefToVideoAttentionMap::new(Matrix::from_fn(6, 6, |_, c| (c == 0) as u8 as f64), 1, 2, 3).unwrap();
        let s = subject_similarity(&a, &masks_2x3()).unwrap();
        for i in 0..6 {
            assert_eq!(s.matrix().row(i), &[0.5, 0.0, 0.0]);
        }
    }

    #[test]
    fn empty_subject_is_rejected() {
        let masks: SubjectMaskSet = "1 2\n11\n".parse().unwrap();
        let a = RefToVideoAttentionMap::new(Matrix::filled(2, 2, 1.0), 1, 1, 2).unwrap();
        assert!(subject_similarity(&a, &masks).is_err());
    }

    #[test]
    fn categorize_examples() {
        let s = sim(&[[0.9, 0.05, 0.05], [0.4, 0.4, 0.2], [0.1, 0.3, 0.3], [0.0, 0.0, 0.0]]);
        assert_eq!(
            categorize(&s),
            vec![Category::Person1, Category::Person1, Category::Person2, Category::Person1]
        );
    }

    #[test]
    fn categorize_matches_brute_force_scan() {
        let mut rng = Rng::new(9);
        let m = Matrix::from_fn(50, 3, |_, _| (rng.uniform() * 4.0).floor());
        let s = SubjectSimilarity::new(m.clone()).unwrap();
        let got = categorize(&s);
        for (i, cat) in got.iter().enumerate() {
            let max = m.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let first = m.row(i).iter().position(|&v| v == max).unwrap();
            assert_eq!(cat.index(), first);
        }
    }

    #[test]
    fn norm_formula_examples() {
        let s = sim(&[[0.1, 0.0, 0.0], [0.5, 0.0, 0.0], [0.9, 0.0, 0.0], [0.0, 0.7, 0.0], [0.0, 0.7, 0.0], [0.0, 0.0, 1.0]]);
        let cats = categorize(&s);
        let map = normalize_labels(&s, &cats, &LabelRangeConfig::default()).unwrap();
        let l = map.labels.as_slice();
        assert!((l[0] - 0.0).abs() < 1e-12 && (l[1] - 2.0).abs() < 1e-12 && (l[2] - 4.0).abs() < 1e-12);
        assert_eq!(&l[3..5], &[22.0, 22.0]);
        assert_eq!(l[5], 12.0);
    }

    #[test]
    fn label_config_validation() {
        LabelRangeConfig::variant_a().validate().unwrap();
        LabelRangeConfig::variant_b().validate().unwrap();
        let mut c = LabelRangeConfig::variant_b();
        c.person2 = (3.0, 10.0);
        assert!(c.validate().is_err());
        let mut c = LabelRangeConfig::variant_b();
        c.background = 21.0;
        assert!(c.validate().is_err());
        let mut c = LabelRangeConfig::variant_b();
        c.audio = (2.0, 5.0);
        assert!(c.validate().is_err());
        let mut c = LabelRangeConfig::variant_b();
        c.person1 = (4.0, 0.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn label_map_text_layout() {
        let map = TokenLabelMap {
            labels: LabelVector::new(vec![0.0, 12.0]).unwrap(),
            categories: vec![Category::Person1, Category::Background],
        };
        let t = map.to_text(1, 1, 2).unwrap();
        assert!(t.ends_with("0 0 0 0 person1 0\n1 0 0 1 background 12\n"), "{t}");
        assert!(map.to_text(2, 1, 2).is_err());
    }

    fn random_map(rng: &mut Rng, f: usize) -> RefToVideoAttentionMap {
        RefToVideoAttentionMap::new(rng.uniform_matrix(f * 6, 6, 0.0, 1.0), f, 2, 3).unwrap()
    }

    proptest! {
        #[test]
        fn labels_are_confined_and_monotone(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let a = random_map(&mut rng, 4);
            let cfg = LabelRangeConfig::default();
            let s = subject_similarity(&a, &masks_2x3()).unwrap();
            let map = build_label_map(&a, &masks_2x3(), &cfg).unwrap();
            prop_assert_eq!(map.len(), 24);
            for person in [Category::Person1, Category::Person2] {
                let (lo, hi) = cfg.range(person).unwrap();
                let idx: Vec<usize> = (0..24).filter(|&i| map.categories[i] == person).collect();
                let ls: Vec<f64> = idx.iter().map(|&i| map.labels.as_slice()[i]).collect();
                prop_assert!(ls.iter().all(|&l| lo <= l && l <= hi));
                let svals: Vec<f64> = idx.iter().map(|&i| s.matrix()[(i, person.index())]).collect();
                let distinct = svals.iter().any(|&v| v != svals[0]);
                if idx.len() >= 2 && distinct {
                    prop_assert_eq!(ls.iter().copied().fold(f64::INFINITY, f64::min), lo);
                    prop_assert_eq!(ls.iter().copied().fold(f64::NEG_INFINITY, f64::max), hi);
                }
                for x in 0..idx.len() {
                    for y in 0..idx.len() {
                        if svals[x] > svals[y] {
                            prop_assert!(ls[x] >= ls[y]);
                        }
                    }
                }
            }
        }

        #[test]
        fn categories_are_scale_invariant(seed in any::<u64>(), scale in 1e-3f64..1e3) {
            let mut rng = Rng::new(seed);
            let a = random_map(&mut rng, 3);
            let s1 = categorize(&subject_similarity(&a, &masks_2x3()).unwrap());
            let s2 = categorize(&subject_similarity(&a.scaled(scale).unwrap(), &masks_2x3()).unwrap());
            prop_assert_eq!(s1, s2);
        }

        #[test]
        fn similarity_ignores_order_within_a_mask(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let a = random_map(&mut rng, 2);
            // Swap the two person-1 reference columns (cells 0 and 1).
            let m = a.matrix();
            let swapped = Matrix::from_fn(m.rows(), m.cols(), |r, c| m[(r, match c { 0 => 1, 1 => 0, x => x })]);
            let b = RefToVideoAttentionMap::new(swapped, 2, 2, 3).unwrap();
            let s1 = subject_similarity(&a, &masks_2x3()).unwrap();
            let s2 = subject_similarity(&b, &masks_2x3()).unwrap();
            prop_assert!(s1.matrix().max_abs_diff(s2.matrix()) < 1e-15);
        }
    }
}
