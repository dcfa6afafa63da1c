//! Controlled template corpus: three sentence families with four lexical
//! slots each, enumerated under the five slot-variation regimes.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const SLOT_COUNT: usize = 4;
pub const VARIANTS_PER_SLOT: usize = 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Family {
    A,
    B,
    C,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::A, Family::B, Family::C];
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::A => "A",
            Family::B => "B",
            Family::C => "C",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Family::A),
            "B" | "b" => Ok(Family::B),
            "C" | "c" => Ok(Family::C),
            _ => Err(invalid("family", format!("unknown family `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Regime {
    C1,
    C2,
    C3,
    C4,
    C5,
}

impl Regime {
    pub const ALL: [Regime; 5] = [Regime::C1, Regime::C2, Regime::C3, Regime::C4, Regime::C5];

    /// Zero-based indices of the slots that vary in this regime.
    pub fn varying_slots(self) -> &'static [usize] {
        match self {
            Regime::C1 => &[0],
            Regime::C2 => &[1],
            Regime::C3 => &[0, 1],
            Regime::C4 => &[0, 1, 2],
            Regime::C5 => &[0, 1, 2, 3],
        }
    }

    pub fn cardinality(self) -> usize {
        VARIANTS_PER_SLOT.pow(self.varying_slots().len() as u32)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = *self as usize + 1;
        write!(f, "C{n}")
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "C1" | "c1" => Ok(Regime::C1),
            "C2" | "c2" => Ok(Regime::C2),
            "C3" | "c3" => Ok(Regime::C3),
            "C4" | "c4" => Ok(Regime::C4),
            "C5" | "c5" => Ok(Regime::C5),
            _ => Err(invalid("regime", format!("unknown regime `{s}`"))),
        }
    }
}

/// A sentence template with four slots and their lexical variant lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateFamily {
    pub name: Family,
    /// Template text with `{}` at each slot position.
    pub template: &'static str,
    pub slot_lists: [[&'static str; VARIANTS_PER_SLOT]; SLOT_COUNT],
    pub anchors: [&'static str; SLOT_COUNT],
}

impl TemplateFamily {
    /// Checks the structural invariants: four slots of 18 unique entries and
    /// every anchor drawn from its own list.
    pub fn validate(&self) -> Result<()> {
        if self.template.matches("{}").count() != SLOT_COUNT {
            return Err(invalid("template", "expected exactly four slot markers"));
        }
        for (slot, list) in self.slot_lists.iter().enumerate() {
            for (i, a) in list.iter().enumerate() {
                if list[i + 1..].contains(a) {
                    return Err(invalid("slot_lists", format!("duplicate `{a}` in slot s{}", slot + 1)));
                }
            }
            if !list.contains(&self.anchors[slot]) {
                return Err(invalid("anchors", format!("anchor of s{} not in its list", slot + 1)));
            }
        }
        Ok(())
    }

    pub fn anchor_indices(&self) -> [usize; SLOT_COUNT] {
        let mut out = [0; SLOT_COUNT];
        for (slot, idx) in out.iter_mut().enumerate() {
            *idx = self.slot_lists[slot]
                .iter()
                .position(|w| *w == self.anchors[slot])
                .expect("anchor is validated to be in its list");
        }
        out
    }

    /// Position of `word` in the list of `slot`, if present.
    pub fn slot_index(&self, slot: usize, word: &str) -> Option<usize> {
        self.slot_lists.get(slot)?.iter().position(|w| *w == word)
    }

    /// Substitutes the four slot strings into the template, byte for byte.
    pub fn render(&self, slots: &[&str; SLOT_COUNT]) -> String {
        let mut out = String::with_capacity(self.template.len() + 64);
        let mut pieces = self.template.split("{}");
        out.push_str(pieces.next().unwrap_or(""));
        for (word, rest) in slots.iter().zip(pieces) {
            out.push_str(word);
            out.push_str(rest);
        }
        out
    }
}

/// One enumerated corpus sentence with its slot assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusRecord {
    pub id: String,
    pub family: Family,
    pub regime: Regime,
    pub slots: [String; SLOT_COUNT],
    /// Zero-based positions of each slot value in its family list.
    pub indices: [usize; SLOT_COUNT],
    pub sentence: String,
}

impl CorpusRecord {
    pub fn make_id(family: Family, regime: Regime, idx: &[usize; SLOT_COUNT]) -> String {
        format!("{family}-{regime}-{}-{}-{}-{}", idx[0], idx[1], idx[2], idx[3])
    }

    /// Rebuilds a record of a builtin family from its slot strings, checking
    /// the rendering and anchor invariants.
    pub fn from_slots(family: Family, regime: Regime, slots: [String; SLOT_COUNT]) -> Result<Self> {
        let fam = builtin_family(family);
        let mut indices = [0; SLOT_COUNT];
        for (slot, word) in slots.iter().enumerate() {
            indices[slot] = fam
                .slot_index(slot, word)
                .ok_or_else(|| invalid("slots", format!("`{word}` is not a variant of s{}", slot + 1)))?;
        }
        let anchors = fam.anchor_indices();
        for slot in 0..SLOT_COUNT {
            if !regime.varying_slots().contains(&slot) && indices[slot] != anchors[slot] {
                return Err(invalid("slots", format!("s{} must hold its anchor in {regime}", slot + 1)));
            }
        }
        let refs = [slots[0].as_str(), slots[1].as_str(), slots[2].as_str(), slots[3].as_str()];
        let sentence = fam.render(&refs);
        Ok(CorpusRecord {
            id: Self::make_id(family, regime, &indices),
            family,
            regime,
            slots,
            indices,
            sentence,
        })
    }
}

/// Enumerates a regime as an odometer over the varying slots, with the
/// earliest varying slot outermost. Non-varying slots hold the anchors.
pub fn enumerate_regime(family: &TemplateFamily, regime: Regime) -> Vec<CorpusRecord> {
    let varying = regime.varying_slots();
    let total = regime.cardinality();
    let anchors = family.anchor_indices();
    let mut out = Vec::with_capacity(total);
    let mut counter = alloc::vec![0usize; varying.len()];
    for _ in 0..total {
        let mut idx = anchors;
        for (pos, &slot) in varying.iter().enumerate() {
            idx[slot] = counter[pos];
        }
        let words = [
            family.slot_lists[0][idx[0]],
            family.slot_lists[1][idx[1]],
            family.slot_lists[2][idx[2]],
            family.slot_lists[3][idx[3]],
        ];
        out.push(CorpusRecord {
            id: CorpusRecord::make_id(family.name, regime, &idx),
            family: family.name,
            regime,
            slots: words.map(String::from),
            indices: idx,
            sentence: family.render(&words),
        });
        for pos in (0..counter.len()).rev() {
            counter[pos] += 1;
            if counter[pos] < VARIANTS_PER_SLOT {
                break;
            }
            counter[pos] = 0;
        }
    }
    out
}

pub fn builtin_families() -> [TemplateFamily; 3] {
    [FAMILY_A, FAMILY_B, FAMILY_C]
}

pub fn builtin_family(name: Family) -> TemplateFamily {
    match name {
        Family::A => FAMILY_A,
        Family::B => FAMILY_B,
        Family::C => FAMILY_C,
    }
}

const FAMILY_A: TemplateFamily = TemplateFamily {
    name: Family::A,
    template: "The minister {} that the {} would bring {} for {}.",
    slot_lists: [
        [
            "said", "stated", "announced", "declared", "reported", "mentioned", "noted", "remarked",
            "observed", "explained", "confirmed", "indicated", "emphasized", "stressed", "asserted",
            "claimed", "communicated", "revealed",
        ],
        [
            "reform", "policy", "measure", "initiative", "program", "plan", "proposal", "strategy",
            "scheme", "package", "project", "framework", "regulation", "decision", "action", "change",
            "legislation", "agreement",
        ],
        [
            "benefits", "advantages", "gains", "improvements", "support", "relief", "opportunities",
            "resources", "protections", "assistance", "enhancements", "incentives", "savings",
            "efficiency gains", "better outcomes", "new opportunities", "additional support",
            "long-term benefits",
        ],
        [
            "citizens", "residents", "families", "households", "communities", "students", "workers",
            "teachers", "patients", "parents", "children", "consumers", "commuters", "farmers",
            "taxpayers", "businesses", "young people", "older adults",
        ],
    ],
    anchors: ["said", "policy", "benefits", "citizens"],
};

const FAMILY_B: TemplateFamily = TemplateFamily {
    name: Family::B,
    template: "The teacher designed a {} lesson with {} exercises for {} students in a {} course.",
    slot_lists: [
        [
            "practical", "engaging", "interactive", "applied", "focused", "dynamic", "coherent",
            "organized", "stimulating", "accessible", "well-paced", "informative", "balanced",
            "classroom-based", "skill-oriented", "thoughtful", "structured", "motivating",
        ],
        [
            "guided", "scaffolded", "targeted", "incremental", "hands-on", "practice-based",
            "reinforcing", "diagnostic", "collaborative", "independent", "reflective", "contextual",
            "problem-solving", "stepwise", "graded", "varied", "follow-up", "manageable",
        ],
        [
            "beginner", "novice", "entry-level", "less-experienced", "newly enrolled", "first-year",
            "junior", "early-stage", "foundation-level", "developing", "emerging", "inexperienced",
            "starting", "lower-level", "pre-intermediate", "first-term", "introductory-level",
            "initial-stage",
        ],
        [
            "introductory", "foundational", "elementary", "basic", "preparatory", "survey", "core",
            "entry-course", "lower-division", "initial", "starting-level", "general", "primer",
            "baseline", "bridge", "orientation", "gateway", "first-cycle",
        ],
    ],
    anchors: ["practical", "guided", "beginner", "introductory"],
};

const FAMILY_C: TemplateFamily = TemplateFamily {
    name: Family::C,
    template: "The doctor recommended a {} treatment with {} monitoring for {} patients during {} recovery.",
    slot_lists: [
        [
            "conservative", "targeted", "supportive", "individualized", "stepwise", "noninvasive",
            "standard", "evidence-based", "supervised", "outpatient", "low-intensity", "short-term",
            "structured", "moderate", "symptom-focused", "regimen-based", "gradual", "protocol-driven",
        ],
        [
            "regular", "continuous", "close", "periodic", "ongoing", "systematic", "daily", "weekly",
            "scheduled", "attentive", "remote", "clinical", "proactive", "routine", "longitudinal",
            "bedside", "sensor-based", "post-discharge",
        ],
        [
            "adult", "elderly", "vulnerable", "high-risk", "postoperative", "chronic", "ambulatory",
            "frail", "stable", "symptomatic", "referred", "monitored", "at-risk", "immunocompromised",
            "long-term-care", "recovering", "geriatric", "working-age",
        ],
        [
            "early", "initial", "gradual", "assisted", "home-based", "extended", "planned", "safe",
            "partial", "staged", "steady", "prolonged", "post-acute", "supported", "late-phase",
            "convalescent", "rehabilitative", "stabilizing",
        ],
    ],
    anchors: ["conservative", "regular", "adult", "early"],
};

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;
    use alloc::string::ToString;

    #[test]
    fn builtin_families_are_well_formed() {
        for fam in builtin_families() {
            fam.validate().unwrap();
        }
        assert_eq!(FAMILY_A.slot_lists[0][0], "said");
        assert!(FAMILY_C.slot_lists[1].contains(&"regular"));
        assert_eq!(FAMILY_C.anchors[1], "regular");
    }

    #[test]
    fn family_b_slots_share_no_strings() {
        let mut seen = BTreeSet::new();
        for list in FAMILY_B.slot_lists.iter() {
            for w in list {
                assert!(seen.insert(*w), "`{w}` appears in two slots");
            }
        }
    }

    #[test]
    fn a_c1_renders_anchor_sentence() {
        let recs = enumerate_regime(&FAMILY_A, Regime::C1);
        assert_eq!(recs.len(), 18);
        let said = recs.iter().find(|r| r.slots[0] == "said").unwrap();
        assert_eq!(
            said.sentence,
            "The minister said that the policy would bring benefits for citizens."
        );
        assert_eq!(said.id, "A-C1-0-1-0-0");
    }

    #[test]
    fn b_c3_holds_anchors() {
        let recs = enumerate_regime(&FAMILY_B, Regime::C3);
        assert_eq!(recs.len(), 324);
        assert!(recs.iter().all(|r| r.slots[2] == "beginner" && r.slots[3] == "introductory"));
        let ids: BTreeSet<_> = recs.iter().map(|r| r.id.clone()).collect();
        assert_eq!(ids.len(), 324);
    }

    #[test]
    fn c_family_template_renders_on_one_line() {
        let s = FAMILY_C.render(&FAMILY_C.anchors);
        assert_eq!(
            s,
            "The doctor recommended a conservative treatment with regular monitoring for adult patients during early recovery."
        );
    }

    #[test]
    fn regime_cardinalities() {
        let expected = [18, 18, 324, 5832, 104_976];
        for (reg, n) in Regime::ALL.iter().zip(expected) {
            assert_eq!(reg.cardinality(), n);
        }
        for fam in builtin_families() {
            for reg in [Regime::C1, Regime::C2, Regime::C3] {
                assert_eq!(enumerate_regime(&fam, reg).len(), reg.cardinality());
            }
        }
    }

    #[test]
    fn from_slots_round_trips_enumeration() {
        for rec in enumerate_regime(&FAMILY_B, Regime::C2) {
            let back = CorpusRecord::from_slots(rec.family, rec.regime, rec.slots.clone()).unwrap();
            assert_eq!(back, rec);
        }
        let mut bad = enumerate_regime(&FAMILY_A, Regime::C1)[0].slots.clone();
        bad[1] = String::from("reform");
        assert!(CorpusRecord::from_slots(Family::A, Regime::C1, bad).is_err());
    }

    #[test]
    fn parse_names() {
        assert_eq!("B".parse::<Family>().unwrap(), Family::B);
        assert!("D".parse::<Family>().is_err());
        assert_eq!("C4".parse::<Regime>().unwrap(), Regime::C4);
        assert_eq!(Regime::C4.to_string(), "C4");
    }
}
