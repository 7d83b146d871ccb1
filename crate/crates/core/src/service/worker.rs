use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{mpsc, Arc};
use std::thread::JoinHandle;

use super::store::{DetectionSummary, DiagnosisResult, UploadStatus};
use super::{Inner, Job, ServiceError};
use crate::data::{reattach_patient_id, Rle};
use crate::engine::{diagnose, ClassLabel, Segmenter};
use crate::reporting::{overlay_file_name, render_overlay, write_overlay, OverlayOptions};
use crate::types::Image;

pub(super) fn spawn(
    inner: Arc<Inner>,
    model: Box<dyn Segmenter + Send>,
    rx: mpsc::Receiver<Job>,
) -> Result<JoinHandle<()>, ServiceError> {
    std::thread::Builder::new()
        .name("inference".into())
        .spawn(move || {
            for upload_id in rx {
                run_job(&inner, model.as_ref(), &upload_id);
            }
        })
        .map_err(ServiceError::Io)
}

fn run_job(inner: &Inner, model: &dyn Segmenter, upload_id: &str) {
    match inner.store.transition(
        upload_id,
        UploadStatus::Received,
        UploadStatus::Processing,
        None,
    ) {
        Ok(true) => {}
        // deleted or already handled
        Ok(false) => return,
        Err(e) => {
            tracing::error!(upload_id, "cannot claim upload: {e}");
            return;
        }
    }
    let outcome = catch_unwind(AssertUnwindSafe(|| process(inner, model, upload_id)))
        .unwrap_or_else(|_| Err("inference panicked".to_string()));
    let failure = match outcome {
        Ok(result) => match inner.store.complete(&result) {
            Ok(true) => None,
            Ok(false) => {
                // deleted while processing
                remove_artifacts(inner, &result);
                None
            }
            Err(e) => {
                remove_artifacts(inner, &result);
                Some(e.to_string())
            }
        },
        Err(reason) => Some(reason),
    };
    if let Some(reason) = failure {
        tracing::warn!(upload_id, "upload failed: {reason}");
        if let Err(e) = inner.store.transition(
            upload_id,
            UploadStatus::Processing,
            UploadStatus::Failed,
            Some(&reason),
        ) {
            tracing::error!(upload_id, "cannot record failure: {e}");
        }
    }
}

fn remove_artifacts(inner: &Inner, result: &DiagnosisResult) {
    let _ = std::fs::remove_file(inner.artifacts_dir.join(&result.overlay_name));
}

/// Runs the model on the stored image. The model sees pixels only; the
/// patient ID is looked up again when the result is assembled.
fn process(
    inner: &Inner,
    model: &dyn Segmenter,
    upload_id: &str,
) -> Result<DiagnosisResult, String> {
    let rec = inner
        .store
        .upload(upload_id)
        .map_err(|e| e.to_string())?
        .ok_or_else(|| "upload vanished".to_string())?;
    let image = Image::load(&rec.stored_path).map_err(|e| e.to_string())?;
    let detections = model.predict(&image).map_err(|e| e.to_string())?;
    let diagnosis = diagnose(&detections, inner.config.detection_threshold);
    let mut overlay = render_overlay(
        upload_id,
        &image,
        &diagnosis.detections,
        &OverlayOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    write_overlay(&mut overlay, &inner.artifacts_dir).map_err(|e| e.to_string())?;
    let image_name = rec
        .stored_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| "stored path has no file name".to_string())?;
    let result = DiagnosisResult {
        upload_id: upload_id.to_string(),
        patient_id: String::new(),
        label: diagnosis.label,
        confidence: diagnosis.confidence,
        overlay_name: overlay_file_name(upload_id),
        image_name,
        detections: diagnosis
            .detections
            .iter()
            .map(|d| DetectionSummary {
                bbox: [d.bbox.r0, d.bbox.c0, d.bbox.r1, d.bbox.c1],
                class_label: match d.class_label {
                    ClassLabel::Tumor => "tumor".into(),
                },
                score: d.score,
                mask_area: d.mask.area(),
                mask_rle: Rle::encode(&d.mask),
            })
            .collect(),
        created_at: inner.clock.now(),
    };
    let ids = inner
        .store
        .patient_map(upload_id)
        .map_err(|e| e.to_string())?;
    reattach_patient_id(result, &ids, upload_id).map_err(|e| e.to_string())
}
