use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, ScanRecord};

/// `scan_id -> patient_id` pairs removed from model inputs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientIdMap {
    entries: BTreeMap<String, String>,
}

impl PatientIdMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, scan_id: impl Into<String>, patient_id: impl Into<String>) {
        self.entries.insert(scan_id.into(), patient_id.into());
    }

    pub fn get(&self, scan_id: &str) -> Option<&str> {
        self.entries.get(scan_id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

/// A record that can carry a patient ID once it is re-attached.
pub trait PatientTagged {
    fn set_patient_id(&mut self, patient_id: String);
}

impl PatientTagged for ScanRecord {
    fn set_patient_id(&mut self, patient_id: String) {
        self.patient_id = Some(patient_id);
    }
}

pub fn strip_patient_ids(dataset: Dataset) -> (Dataset, PatientIdMap) {
    let mut map = PatientIdMap::new();
    let scans = dataset
        .into_scans()
        .into_iter()
        .map(|mut scan| {
            if let Some(pid) = scan.patient_id.take() {
                map.insert(scan.scan_id.clone(), pid);
            }
            scan
        })
        .collect();
    (Dataset { scans }, map)
}

pub fn reattach_patient_id<R: PatientTagged>(
    mut record: R,
    map: &PatientIdMap,
    scan_id: &str,
) -> Result<R, DataError> {
    let pid = map
        .get(scan_id)
        .ok_or_else(|| DataError::UnknownScanId(scan_id.to_string()))?;
    record.set_patient_id(pid.to_string());
    Ok(record)
}

/// Restores every mapped ID onto a stripped dataset. Scans without an entry
/// stay anonymous.
pub fn reattach_patient_ids(dataset: Dataset, map: &PatientIdMap) -> Dataset {
    let scans = dataset
        .into_scans()
        .into_iter()
        .map(|mut scan| {
            if let Some(pid) = map.get(&scan.scan_id) {
                scan.patient_id = Some(pid.to_string());
            }
            scan
        })
        .collect();
    Dataset { scans }
}
