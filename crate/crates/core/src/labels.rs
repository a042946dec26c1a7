//! Hemorrhage classes and per-slice label vectors.

use std::fmt;

/// The six outputs, in model/label column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Class {
    Epidural,
    Intraparenchymal,
    Intraventricular,
    Subarachnoid,
    Subdural,
    Any,
}

pub const NUM_CLASSES: usize = 6;
pub const NUM_SUBTYPES: usize = 5;

impl Class {
    pub const ALL: [Class; NUM_CLASSES] = [
        Class::Epidural,
        Class::Intraparenchymal,
        Class::Intraventricular,
        Class::Subarachnoid,
        Class::Subdural,
        Class::Any,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Name used in prediction-table IDs.
    pub fn name(self) -> &'static str {
        match self {
            Class::Epidural => "epidural",
            Class::Intraparenchymal => "intraparenchymal",
            Class::Intraventricular => "intraventricular",
            Class::Subarachnoid => "subarachnoid",
            Class::Subdural => "subdural",
            Class::Any => "any",
        }
    }

    pub fn abbreviation(self) -> &'static str {
        match self {
            Class::Epidural => "EDH",
            Class::Intraparenchymal => "IPH",
            Class::Intraventricular => "IVH",
            Class::Subarachnoid => "SAH",
            Class::Subdural => "SDH",
            Class::Any => "any",
        }
    }

    pub fn from_name(name: &str) -> Option<Class> {
        Class::ALL.into_iter().find(|c| c.name() == name)
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Six binary flags ordered (EDH, IPH, IVH, SAH, SDH, any).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct LabelVector(pub [bool; NUM_CLASSES]);

impl LabelVector {
    pub const NEGATIVE: LabelVector = LabelVector([false; NUM_CLASSES]);

    /// Builds a vector from the five subtype flags, deriving `any`.
    pub fn from_subtypes(subtypes: [bool; NUM_SUBTYPES]) -> Self {
        let mut flags = [false; NUM_CLASSES];
        flags[..NUM_SUBTYPES].copy_from_slice(&subtypes);
        flags[Class::Any.index()] = subtypes.iter().any(|&s| s);
        LabelVector(flags)
    }

    pub fn get(&self, class: Class) -> bool {
        self.0[class.index()]
    }

    /// `any` equals the OR of the five subtypes.
    pub fn is_consistent(&self) -> bool {
        self.0[Class::Any.index()] == self.0[..NUM_SUBTYPES].iter().any(|&s| s)
    }

    pub fn as_f64(&self) -> [f64; NUM_CLASSES] {
        self.0.map(|b| if b { 1.0 } else { 0.0 })
    }

    pub fn count_positive(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}
