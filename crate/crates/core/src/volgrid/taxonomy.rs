//! The 27-entry cerebellum label set: background plus 13 classes per hemisphere.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Label id reserved for background.
pub const BACKGROUND: u8 = 0;
/// Number of foreground labels (13 classes x 2 hemispheres).
pub const FOREGROUND_LABELS: usize = 26;
/// Background plus foreground.
pub const LABEL_COUNT: usize = FOREGROUND_LABELS + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Hemisphere {
    Left,
    Right,
}

impl Hemisphere {
    pub fn opposite(self) -> Self {
        match self {
            Hemisphere::Left => Hemisphere::Right,
            Hemisphere::Right => Hemisphere::Left,
        }
    }

    /// Class index in the hemisphere network output (0 is background).
    pub fn stage_index(self) -> usize {
        match self {
            Hemisphere::Left => 1,
            Hemisphere::Right => 2,
        }
    }

    pub fn from_stage_index(i: usize) -> Option<Self> {
        match i {
            1 => Some(Hemisphere::Left),
            2 => Some(Hemisphere::Right),
            _ => None,
        }
    }
}

/// Lobule classes shared by both hemispheres, in anterior-to-posterior order,
/// followed by white matter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[allow(non_camel_case_types)]
pub enum LobuleClass {
    I_II,
    III,
    IV,
    V,
    VI,
    CrusI,
    CrusII,
    VIIB,
    VIIIA,
    VIIIB,
    IX,
    X,
    WM,
}

impl LobuleClass {
    pub const ALL: [LobuleClass; 13] = [
        LobuleClass::I_II,
        LobuleClass::III,
        LobuleClass::IV,
        LobuleClass::V,
        LobuleClass::VI,
        LobuleClass::CrusI,
        LobuleClass::CrusII,
        LobuleClass::VIIB,
        LobuleClass::VIIIA,
        LobuleClass::VIIIB,
        LobuleClass::IX,
        LobuleClass::X,
        LobuleClass::WM,
    ];

    /// The twelve cortical classes (everything except white matter).
    pub const LOBULES: [LobuleClass; 12] = [
        LobuleClass::I_II,
        LobuleClass::III,
        LobuleClass::IV,
        LobuleClass::V,
        LobuleClass::VI,
        LobuleClass::CrusI,
        LobuleClass::CrusII,
        LobuleClass::VIIB,
        LobuleClass::VIIIA,
        LobuleClass::VIIIB,
        LobuleClass::IX,
        LobuleClass::X,
    ];

    /// Class index in the lobule network output (0 is background, 1..=13).
    pub fn stage_index(self) -> usize {
        self as usize + 1
    }

    pub fn from_stage_index(i: usize) -> Option<Self> {
        if i == 0 {
            None
        } else {
            Self::ALL.get(i - 1).copied()
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LobuleClass::I_II => "Lobules I-II",
            LobuleClass::III => "Lobule III",
            LobuleClass::IV => "Lobule IV",
            LobuleClass::V => "Lobule V",
            LobuleClass::VI => "Lobule VI",
            LobuleClass::CrusI => "Crus I",
            LobuleClass::CrusII => "Crus II",
            LobuleClass::VIIB => "Lobule VIIB",
            LobuleClass::VIIIA => "Lobule VIIIA",
            LobuleClass::VIIIB => "Lobule VIIIB",
            LobuleClass::IX => "Lobule IX",
            LobuleClass::X => "Lobule X",
            LobuleClass::WM => "White Matter",
        }
    }
}

/// Number of lobule-network output classes (background + 13).
pub const STAGE2_CLASSES: usize = 14;
/// Number of hemisphere-network output classes (background, left, right).
pub const STAGE1_CLASSES: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaxonomyEntry {
    pub id: u8,
    pub name: String,
    pub hemisphere: Hemisphere,
    pub class: LobuleClass,
}

impl fmt::Display for TaxonomyEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.name, self.id)
    }
}

/// Mapping between label ids and (hemisphere, class) pairs.
///
/// Ids 1..=13 are the left hemisphere in [`LobuleClass::ALL`] order, 14..=26 the
/// right hemisphere in the same order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelTaxonomy {
    entries: Vec<TaxonomyEntry>,
}

impl Default for LabelTaxonomy {
    fn default() -> Self {
        Self::cerebellum()
    }
}

impl LabelTaxonomy {
    pub fn cerebellum() -> Self {
        let mut entries = Vec::with_capacity(FOREGROUND_LABELS);
        for hemisphere in [Hemisphere::Left, Hemisphere::Right] {
            for class in LobuleClass::ALL {
                let side = match hemisphere {
                    Hemisphere::Left => "Left",
                    Hemisphere::Right => "Right",
                };
                entries.push(TaxonomyEntry {
                    id: (entries.len() + 1) as u8,
                    name: format!("{side} {}", class.name()),
                    hemisphere,
                    class,
                });
            }
        }
        Self { entries }
    }

    pub fn entries(&self) -> &[TaxonomyEntry] {
        &self.entries
    }

    pub fn entry(&self, id: u8) -> Option<&TaxonomyEntry> {
        if id == BACKGROUND {
            None
        } else {
            self.entries.get(id as usize - 1)
        }
    }

    pub fn contains(&self, id: u8) -> bool {
        id == BACKGROUND || (id as usize) <= self.entries.len()
    }

    pub fn lookup(&self, hemisphere: Hemisphere, class: LobuleClass) -> u8 {
        let base = match hemisphere {
            Hemisphere::Left => 0,
            Hemisphere::Right => LobuleClass::ALL.len(),
        };
        (base + class as usize + 1) as u8
    }

    /// Swaps hemisphere and keeps the class; background maps to itself.
    pub fn mirror(&self, id: u8) -> u8 {
        match self.entry(id) {
            None => id,
            Some(e) => self.lookup(e.hemisphere.opposite(), e.class),
        }
    }

    /// Lookup table indexed by label id, for hot loops.
    pub fn mirror_table(&self) -> [u8; 256] {
        let mut table = [0u8; 256];
        for (i, t) in table.iter_mut().enumerate() {
            *t = if self.contains(i as u8) { self.mirror(i as u8) } else { i as u8 };
        }
        table
    }

    /// Hemisphere-network class of a label (0 background, 1 left, 2 right).
    pub fn stage1_index(&self, id: u8) -> usize {
        self.entry(id).map_or(0, |e| e.hemisphere.stage_index())
    }

    /// Lobule-network class of a label (0 background, 1..=13).
    pub fn stage2_index(&self, id: u8) -> usize {
        self.entry(id).map_or(0, |e| e.class.stage_index())
    }

    pub fn name(&self, id: u8) -> &str {
        self.entry(id).map_or("Background", |e| e.name.as_str())
    }
}
