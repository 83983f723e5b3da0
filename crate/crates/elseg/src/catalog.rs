//! Defect class catalog: names and contiguous integer indices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value marking pixels excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Ordered set of class labels with background fixed at index 0.
///
/// Mask pixels hold the class index directly, so index `0` is background and
/// indices `1..=num_defect_classes()` are defects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    names: Vec<String>,
}

impl ClassCatalog {
    /// Build a catalog from defect class names; background is prepended at index 0.
    pub fn from_defect_names<S: Into<String>>(defects: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut names = vec!["background".to_string()];
        names.extend(defects.into_iter().map(Into::into));
        let catalog = ClassCatalog { names };
        catalog.validate()?;
        Ok(catalog)
    }

    /// Catalog with `c` generically named defect classes (`defect1`, `defect2`, ...).
    pub fn synthetic(num_defect_classes: usize) -> Self {
        let names = (1..=num_defect_classes).map(|i| format!("defect{i}"));
        Self::from_defect_names(names).expect("generated names are unique")
    }

    /// The four aggregated defect categories of EL-image defect datasets.
    pub fn el_defects() -> Self {
        Self::from_defect_names(["Crack", "Contact", "Interconnect", "Corrosion"])
            .expect("static names are unique")
    }

    fn validate(&self) -> Result<()> {
        for (i, a) in self.names.iter().enumerate() {
            if a.is_empty() {
                return Err(Error::InvalidArgument("empty class name".into()));
            }
            if self.names[..i].contains(a) {
                return Err(Error::InvalidArgument(format!("duplicate class name `{a}`")));
            }
        }
        Ok(())
    }

    /// Number of defect classes `C` (background excluded).
    pub fn num_defect_classes(&self) -> usize {
        self.names.len() - 1
    }

    /// Total class count `C + 1` including background.
    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn background_index(&self) -> usize {
        0
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Indices of the defect classes, i.e. `1..=C`.
    pub fn defect_indices(&self) -> std::ops::RangeInclusive<usize> {
        1..=self.num_defect_classes()
    }
}
