//! Image inventory: which patient and eye each image belongs to, and the
//! demographics known for each patient.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Female,
    Male,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub patient_id: String,
    #[serde(default)]
    pub eye_id: Option<String>,
    /// Photographic field, e.g. primary, nasal, temporal.
    #[serde(default)]
    pub field: Option<String>,
    #[serde(default)]
    pub uri: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    #[serde(default)]
    pub age: Option<f64>,
    #[serde(default)]
    pub gender: Option<Gender>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub images: BTreeMap<String, ImageRecord>,
    pub patients: BTreeMap<String, PatientRecord>,
}

impl Manifest {
    pub fn add_image(&mut self, image: ImageRecord) {
        self.images.insert(image.image_id.clone(), image);
    }

    pub fn add_patient(&mut self, patient: PatientRecord) {
        self.patients.insert(patient.patient_id.clone(), patient);
    }

    /// Image ids belonging to `eye_id`, in id order.
    pub fn images_of_eye(&self, eye_id: &str) -> Vec<&str> {
        self.images
            .values()
            .filter(|i| i.eye_id.as_deref() == Some(eye_id))
            .map(|i| i.image_id.as_str())
            .collect()
    }

    pub fn patients_of(&self, image_ids: impl IntoIterator<Item = impl AsRef<str>>) -> BTreeSet<&str> {
        image_ids
            .into_iter()
            .filter_map(|id| self.images.get(id.as_ref()))
            .map(|i| i.patient_id.as_str())
            .collect()
    }
}
