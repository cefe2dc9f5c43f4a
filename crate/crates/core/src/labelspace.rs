//! Class-set algebra over {BG, WMH, ISL} and the merged pseudo-classes.
//!
//! Every supervision method is expressed as a pair of class sets: the classes
//! the cross-entropy term is computed over and the classes the Dice term is
//! averaged over. Merged members (`NOT_WMH`, `NOT_ISL`, `NOT_BG`) stand for the
//! union of the label codes they absorb; a model predicts them by summing the
//! probabilities of the absorbed channels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{ChannelVolume, Grid, LabelVolume, Mask, ProbVolume};

/// Voxel label code. Exactly one per voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    #[default]
    Bg = 0,
    Wmh = 1,
    Isl = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Bg, Label::Wmh, Label::Isl];
    pub const FOREGROUND: [Label; 2] = [Label::Wmh, Label::Isl];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            0 => Some(Label::Bg),
            1 => Some(Label::Wmh),
            2 => Some(Label::Isl),
            _ => None,
        }
    }

    pub fn class(self) -> Class {
        match self {
            Label::Bg => Class::Bg,
            Label::Wmh => Class::Wmh,
            Label::Isl => Class::Isl,
        }
    }

    fn bit(self) -> u8 {
        1 << self.code()
    }
}

/// A class a loss term or output channel can refer to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Class {
    Bg,
    Wmh,
    Isl,
    /// BG ∪ ISL.
    NotWmh,
    /// BG ∪ WMH.
    NotIsl,
    /// WMH ∪ ISL.
    NotBg,
}

impl Class {
    /// Label codes covered, as a bit set over {BG, WMH, ISL}.
    pub fn codes(self) -> u8 {
        match self {
            Class::Bg => 0b001,
            Class::Wmh => 0b010,
            Class::Isl => 0b100,
            Class::NotWmh => 0b101,
            Class::NotIsl => 0b011,
            Class::NotBg => 0b110,
        }
    }

    pub fn covers(self, label: Label) -> bool {
        self.codes() & label.bit() != 0
    }

    pub fn is_merged(self) -> bool {
        matches!(self, Class::NotWmh | Class::NotIsl | Class::NotBg)
    }

    /// The single label this class denotes, if it is not merged.
    pub fn as_label(self) -> Option<Label> {
        match self {
            Class::Bg => Some(Label::Bg),
            Class::Wmh => Some(Label::Wmh),
            Class::Isl => Some(Label::Isl),
            _ => None,
        }
    }

    /// Canonical position: by smallest absorbed code, plain before merged.
    /// `NOT_WMH` therefore takes the background slot in `{NOT_WMH, WMH}`.
    fn order_key(self) -> (u8, bool) {
        (self.codes().trailing_zeros() as u8, self.is_merged())
    }

    fn name(self) -> &'static str {
        match self {
            Class::Bg => "BG",
            Class::Wmh => "WMH",
            Class::Isl => "ISL",
            Class::NotWmh => "NOT_WMH",
            Class::NotIsl => "NOT_ISL",
            Class::NotBg => "NOT_BG",
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Class {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "BG" => Class::Bg,
            "WMH" => Class::Wmh,
            "ISL" => Class::Isl,
            "NOT_WMH" => Class::NotWmh,
            "NOT_ISL" => Class::NotIsl,
            "NOT_BG" => Class::NotBg,
            other => return Err(Error::Data(format!("unknown class name {other:?}"))),
        })
    }
}

impl From<Class> for String {
    fn from(c: Class) -> String {
        c.to_string()
    }
}

impl TryFrom<String> for Class {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Non-empty set of classes with pairwise-disjoint code coverage, kept in
/// canonical order so channel indices are stable.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClassSet {
    members: Vec<Class>,
}

impl ClassSet {
    pub fn new(members: impl IntoIterator<Item = Class>) -> Result<Self> {
        let mut members: Vec<Class> = members.into_iter().collect();
        if members.is_empty() {
            return Err(Error::Config("class set must not be empty".into()));
        }
        let mut seen = 0u8;
        for &m in &members {
            if seen & m.codes() != 0 {
                return Err(Error::Config(format!(
                    "class {m} overlaps another member of the set"
                )));
            }
            seen |= m.codes();
        }
        members.sort_by_key(|c| c.order_key());
        Ok(Self { members })
    }

    pub fn members(&self) -> &[Class] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, c: Class) -> bool {
        self.members.contains(&c)
    }

    /// Union of covered codes.
    pub fn codes(&self) -> u8 {
        self.members.iter().fold(0, |acc, m| acc | m.codes())
    }

    /// Covers every label code exactly once.
    pub fn is_partition(&self) -> bool {
        self.codes() == 0b111
    }

    pub fn without(&self, c: Class) -> Result<Self> {
        Self::new(self.members.iter().copied().filter(|&m| m != c))
    }

    /// Foreground classes only (members that do not absorb BG).
    pub fn foreground(&self) -> Vec<Class> {
        self.members
            .iter()
            .copied()
            .filter(|m| !m.covers(Label::Bg))
            .collect()
    }
}

impl fmt::Display for ClassSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.members.iter().map(|c| c.name()).collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

/// Which ground-truth masks a sample carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelAvailability {
    pub has_wmh: bool,
    pub has_isl: bool,
}

impl LabelAvailability {
    pub const FULL: Self = Self {
        has_wmh: true,
        has_isl: true,
    };
    pub const WMH_ONLY: Self = Self {
        has_wmh: true,
        has_isl: false,
    };
    pub const ISL_ONLY: Self = Self {
        has_wmh: false,
        has_isl: true,
    };

    pub fn is_full(&self) -> bool {
        self.has_wmh && self.has_isl
    }

    pub fn has(&self, label: Label) -> bool {
        match label {
            Label::Bg => self.is_full(),
            Label::Wmh => self.has_wmh,
            Label::Isl => self.has_isl,
        }
    }
}

/// Supervision method, as seen by the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Multiclass,
    BinaryWmh,
    BinaryIsl,
    ClassConditional,
    Pseudolabels,
    PhasedStage1,
    PhasedStage2,
    ClassAdaptive,
    Marginal,
}

/// Class sets of one loss evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSets {
    pub ce: ClassSet,
    pub dice: ClassSet,
}

impl ClassSets {
    fn of(ce: &[Class], dice: &[Class]) -> Self {
        Self {
            ce: ClassSet::new(ce.iter().copied()).expect("static class set"),
            dice: ClassSet::new(dice.iter().copied()).expect("static class set"),
        }
    }

    /// Dice set equal to the CE set minus BG (the default rule).
    fn dice_without_bg(ce: &[Class]) -> Self {
        let dice: Vec<Class> = ce.iter().copied().filter(|&c| c != Class::Bg).collect();
        Self::of(ce, &dice)
    }
}

/// One loss evaluation against one output head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossTerm {
    pub head: usize,
    pub sets: ClassSets,
}

fn missing(method: Method, what: &str) -> Error {
    Error::Config(format!("{method:?} needs the {what} label, which this sample lacks"))
}

/// `(C_CE, C_Dice)` for a sample under a single-head method.
///
/// The class-conditional method has one case per head; use [`loss_terms`].
pub fn class_set_for(avail: LabelAvailability, method: Method) -> Result<ClassSets> {
    use Class::*;
    let full = avail.is_full();
    Ok(match method {
        Method::Multiclass | Method::Pseudolabels | Method::PhasedStage2 => {
            if !full {
                return Err(missing(method, "WMH and ISL"));
            }
            ClassSets::dice_without_bg(&[Bg, Wmh, Isl])
        }
        Method::BinaryWmh => {
            if !avail.has_wmh {
                return Err(missing(method, "WMH"));
            }
            ClassSets::dice_without_bg(&[Bg, Wmh])
        }
        Method::BinaryIsl => {
            if !avail.has_isl {
                return Err(missing(method, "ISL"));
            }
            ClassSets::dice_without_bg(&[Bg, Isl])
        }
        Method::ClassConditional => {
            return match (avail.has_wmh, avail.has_isl) {
                (true, false) => class_set_for(avail, Method::BinaryWmh),
                (false, true) => class_set_for(avail, Method::BinaryIsl),
                (true, true) => Err(Error::Config(
                    "class-conditional sample with both labels has one case per head".into(),
                )),
                (false, false) => Err(missing(method, "WMH or ISL")),
            };
        }
        Method::PhasedStage1 => ClassSets::dice_without_bg(&[Bg, NotBg]),
        Method::ClassAdaptive => match (avail.has_wmh, avail.has_isl) {
            (true, true) => ClassSets::dice_without_bg(&[Bg, Wmh, Isl]),
            // A missing foreground label makes BG unknown as well.
            (true, false) => ClassSets::of(&[Wmh], &[Wmh]),
            (false, true) => ClassSets::of(&[Isl], &[Isl]),
            (false, false) => return Err(missing(method, "WMH or ISL")),
        },
        Method::Marginal => match (avail.has_wmh, avail.has_isl) {
            (true, true) => ClassSets::of(&[Bg, Wmh, Isl], &[Bg, Wmh, Isl]),
            (true, false) => ClassSets::of(&[NotWmh, Wmh], &[NotWmh, Wmh]),
            (false, true) => ClassSets::of(&[NotIsl, Isl], &[NotIsl, Isl]),
            (false, false) => return Err(missing(method, "WMH or ISL")),
        },
    })
}

/// All loss evaluations for a sample. Only class-conditional training on a
/// fully labelled sample yields two terms (one per head, averaged by the caller).
pub fn loss_terms(avail: LabelAvailability, method: Method) -> Result<Vec<LossTerm>> {
    if method == Method::ClassConditional {
        let mut terms = Vec::new();
        if avail.has_wmh {
            terms.push(LossTerm {
                head: 0,
                sets: class_set_for(LabelAvailability::WMH_ONLY, Method::BinaryWmh)?,
            });
        }
        if avail.has_isl {
            terms.push(LossTerm {
                head: 1,
                sets: class_set_for(LabelAvailability::ISL_ONLY, Method::BinaryIsl)?,
            });
        }
        if terms.is_empty() {
            return Err(missing(method, "WMH or ISL"));
        }
        return Ok(terms);
    }
    Ok(vec![LossTerm {
        head: 0,
        sets: class_set_for(avail, method)?,
    }])
}

/// Per-voxel target vectors over `cs` (channels-last).
///
/// Plain members are label indicators; merged members indicate any absorbed
/// code. A voxel whose code no member covers gets an all-zero vector, which is
/// only legitimate when the set does not model background at all (as in the
/// class-adaptive partial cases); otherwise it is an error.
pub fn one_hot(y: &LabelVolume, cs: &ClassSet) -> Result<ChannelVolume> {
    let covers_bg = cs.codes() & Label::Bg.bit() != 0;
    let k = cs.len();
    let mut data = vec![0.0; y.len() * k];
    for (i, &l) in y.data().iter().enumerate() {
        let mut hit = false;
        for (c, m) in cs.members().iter().enumerate() {
            if m.covers(l) {
                data[i * k + c] = 1.0;
                hit = true;
            }
        }
        if !hit && covers_bg {
            return Err(Error::Data(format!(
                "class set {cs} cannot represent label {l:?}; restrict the labels first"
            )));
        }
    }
    ChannelVolume::new(*y.geom(), cs.members().to_vec(), data)
}

/// Output channels summed into each member of `cs`.
///
/// Errors when a member's codes are not exactly the union of some channels.
pub fn member_channels(space: &[Class], cs: &ClassSet) -> Result<Vec<Vec<usize>>> {
    cs.members()
        .iter()
        .map(|m| {
            let chans: Vec<usize> = space
                .iter()
                .enumerate()
                .filter(|(_, ch)| ch.codes() & !m.codes() == 0)
                .map(|(i, _)| i)
                .collect();
            let union = chans.iter().fold(0u8, |a, &i| a | space[i].codes());
            if union != m.codes() {
                return Err(Error::Config(format!(
                    "class {m} is not representable by output channels {space:?}"
                )));
            }
            Ok(chans)
        })
        .collect()
}

/// Sums channel probabilities into the members of `cs`.
pub fn marginalize_probs(p: &ProbVolume, cs: &ClassSet) -> Result<ProbVolume> {
    let groups = member_channels(p.classes(), cs)?;
    let k_in = p.channels();
    let k = cs.len();
    let mut data = vec![0.0; p.voxels() * k];
    for (i, v) in p.data().chunks_exact(k_in).enumerate() {
        for (c, g) in groups.iter().enumerate() {
            data[i * k + c] = g.iter().map(|&ch| v[ch]).sum();
        }
    }
    ChannelVolume::new(*p.geom(), cs.members().to_vec(), data)
}

/// Maps labels not representable in an output space to BG
/// (e.g. ISL voxels become background for a `[BG, WMH]` model).
pub fn restrict_to_space(y: &LabelVolume, space: &[Class]) -> LabelVolume {
    y.map(|l| {
        if l != Label::Bg && space.iter().any(|c| c.covers(l)) {
            l
        } else {
            Label::Bg
        }
    })
}

/// Foreground (WMH or ISL) as a single class.
pub fn merge_foreground(y: &LabelVolume) -> Mask {
    y.map(|l| l != Label::Bg)
}

/// Fills the missing labels of a partially labelled sample from a teacher's
/// hard prediction.
///
/// Per voxel: a positive available label wins; a teacher vote for an
/// available class that the ground truth rejects becomes BG; otherwise the
/// teacher's label is used. Fully labelled samples are returned unchanged.
pub fn compose_pseudolabel(
    gt: &LabelVolume,
    avail: LabelAvailability,
    teacher: &LabelVolume,
) -> Result<LabelVolume> {
    gt.geom().check_same(teacher.geom())?;
    if avail.is_full() {
        return Ok(gt.clone());
    }
    let data = gt
        .data()
        .iter()
        .zip(teacher.data())
        .map(|(&g, &t)| {
            if g != Label::Bg {
                g
            } else if t != Label::Bg && avail.has(t) {
                Label::Bg
            } else {
                t
            }
        })
        .collect();
    Grid::new(*gt.geom(), data)
}
