use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Samples of one domain.
///
/// Target datasets may carry class labels; training never reads them, they
/// exist for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub features: Tensor<f64>,
    pub class_labels: Option<Vec<usize>>,
    pub classes: usize,
    pub domain_label: usize,
    pub name: String,
}

impl DomainDataset {
    pub fn new(
        features: Tensor<f64>,
        class_labels: Option<Vec<usize>>,
        classes: usize,
        domain_label: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        let (n, _) = features
            .dims2()
            .ok_or_else(|| Error::invalid("dataset features must be a matrix"))?;
        features.check_finite()?;
        if let Some(labels) = &class_labels {
            if labels.len() != n {
                return Err(Error::invalid(format!("{} labels for {n} rows", labels.len())));
            }
            if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
                return Err(Error::Label { label, classes });
            }
        }
        if domain_label > 1 {
            return Err(Error::invalid("domain label must be 0 or 1"));
        }
        Ok(DomainDataset {
            features,
            class_labels,
            classes,
            domain_label,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.class_labels
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("dataset `{}` has no class labels", self.name)))
    }

    pub fn with_features(&self, features: Tensor<f64>) -> Self {
        DomainDataset {
            features,
            ..self.clone()
        }
    }

    /// SHA-256 over shape, little-endian feature bits and labels.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for &d in self.features.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in self.features.data() {
            h.update(v.to_le_bytes());
        }
        if let Some(labels) = &self.class_labels {
            for &l in labels {
                h.update((l as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Fraction of rows in each class.
    pub fn class_balance(&self) -> Result<Vec<f64>> {
        let labels = self.labels()?;
        let mut counts = vec![0usize; self.classes];
        for &l in labels {
            counts[l] += 1;
        }
        Ok(counts.iter().map(|&c| c as f64 / labels.len() as f64).collect())
    }
}
