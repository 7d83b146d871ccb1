//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Set `TUMORSEG_REFERENCE_DATA` to a masked dataset directory to run the
//! optional reference-scale evaluation (reported, never gating).

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::Value;
use tempfile::TempDir;

use tumorseg::data::{
    generate_synthetic_dataset, load_dataset, split_dataset, strip_patient_ids, Dataset, Label,
    Layout, SplitRatios, SynthParams,
};
use tumorseg::engine::{
    build_model, diagnose, list_checkpoints, load_inference_model, load_run, pretrain_backbone,
    save_backbone, train, Detection, Mode, ModelConfig, PretrainOptions, SegmentationModel,
    Segmenter, TrainingHistory, HISTORY_FILE,
};
use tumorseg::metrics::{
    average_precision, box_iou, evaluate, mask_iou, match_detections, pr_curve, EvalConfig,
};
use tumorseg::service::{Service, ServiceConfig, SystemClock};
use tumorseg::types::{BBox, Image, Mask};

const USER: &str = "clinician";
const PASSWORD: &str = "acceptance-pass";

type Outcome = Result<String, String>;

struct Suite {
    failed: usize,
}

impl Suite {
    fn record(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                self.failed += 1;
                println!("FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

struct TrainedRun {
    _dir: TempDir,
    run_dir: PathBuf,
    config: ModelConfig,
    dataset: Dataset,
    model: SegmentationModel,
    history: TrainingHistory,
}

fn train_synthetic() -> TrainedRun {
    let dir = TempDir::new().unwrap();
    let run_dir = dir.path().join("run");
    std::fs::create_dir_all(&run_dir).unwrap();
    let config = ModelConfig {
        epochs: 20,
        ..ModelConfig::default()
    };
    let dataset = generate_synthetic_dataset(40, 7, &SynthParams::default()).unwrap();
    let (stripped, _) = strip_patient_ids(dataset.clone());
    let opts = PretrainOptions {
        seed: config.random_seed,
        ..PretrainOptions::default()
    };
    let (backbone, _, _) = pretrain_backbone(&config.backbone_id, &opts).unwrap();
    let weights = run_dir.join("pretrained_backbone.weights");
    save_backbone(&backbone, &weights).unwrap();
    let mut model = build_model(&config, &weights, true).unwrap();
    let history = train(
        &mut model,
        &stripped,
        &Dataset::default(),
        &config,
        &run_dir,
    )
    .unwrap();
    model.set_mode(Mode::Inference);
    TrainedRun {
        _dir: dir,
        run_dir,
        config,
        dataset,
        model,
        history,
    }
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let s = common::run_metric_oracles(300, 20_240_601);
    let elapsed = start.elapsed();
    check(s.cases >= 200, || format!("only {} cases", s.cases))?;
    check(s.max_abs_error <= 1e-9, || {
        format!("max abs error {:e}", s.max_abs_error)
    })?;
    check(s.discrete_mismatches.is_empty(), || {
        format!(
            "{} discrete mismatches, first: {}",
            s.discrete_mismatches.len(),
            s.discrete_mismatches[0]
        )
    })?;
    check(elapsed < Duration::from_secs(60), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "{} cases, {} comparisons, max abs error {:e}",
        s.cases, s.comparisons, s.max_abs_error
    ))
}

fn worked_values() -> Outcome {
    let a = Mask::from_box(3, 3, &BBox::new(0.0, 0.0, 2.0, 2.0));
    let b = Mask::from_box(3, 3, &BBox::new(1.0, 1.0, 3.0, 3.0));
    let miou = mask_iou(&a, &b).map_err(|e| e.to_string())?;
    let biou = box_iou(
        &BBox::new(0.0, 0.0, 2.0, 2.0),
        &BBox::new(1.0, 1.0, 3.0, 3.0),
    )
    .map_err(|e| e.to_string())?;
    check(miou == 1.0 / 7.0 && biou == 1.0 / 7.0, || {
        format!("IoU {miou} / {biou}, expected 1/7")
    })?;

    let gt = vec![Mask::from_box(8, 8, &BBox::new(0.0, 0.0, 4.0, 4.0))];
    let det = |mask: Mask, score| Detection {
        bbox: BBox::new(0.0, 0.0, 8.0, 8.0),
        class_label: tumorseg::engine::ClassLabel::Tumor,
        score,
        mask,
    };
    let preds = [
        det(Mask::from_box(8, 8, &BBox::new(4.0, 4.0, 8.0, 8.0)), 0.9),
        det(gt[0].clone(), 0.8),
    ];
    let m = match_detections("worked", &preds, &gt, 0.5).map_err(|e| e.to_string())?;
    let ap = average_precision(&pr_curve(&m.records, 1));
    check(ap == 0.5, || format!("AP {ap}, expected 0.5"))?;
    Ok(format!("IoU = {miou:.6} (1/7), AP = {ap}"))
}

fn overfit(run: &TrainedRun) -> Outcome {
    let report = evaluate(&run.model, &run.dataset, &EvalConfig::from(&run.config))
        .map_err(|e| e.to_string())?;
    let losses = run.history.train_losses();
    let (first, last) = (losses[0], *losses.last().unwrap());
    let tail = &losses[losses.len() * 3 / 4..];
    let tail_min = tail.iter().copied().fold(f64::INFINITY, f64::min);
    let best = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let detail = format!(
        "held-in mean IoU {:.4}, AP@0.5 {:.4}, train loss {first:.4} -> {last:.4}, minimum {best:.4} {} the final quartile",
        report.mean_iou,
        report.ap,
        if tail_min == best { "in" } else { "outside" }
    );
    check(!report.mean_iou_empty && report.mean_iou > 0.5, || {
        detail.clone()
    })?;
    check(last < first, || detail.clone())?;
    Ok(detail)
}

fn reload_fidelity(run: &TrainedRun) -> Outcome {
    let reloaded = load_inference_model(&run.run_dir, &run.config).map_err(|e| e.to_string())?;
    let mut max_diff = 0.0f64;
    let mut total = 0;
    for scan in run
        .dataset
        .iter()
        .filter(|s| s.label() == Some(Label::Tumor))
        .take(5)
    {
        let a = run.model.predict(scan.image()).map_err(|e| e.to_string())?;
        let b = reloaded.predict(scan.image()).map_err(|e| e.to_string())?;
        check(a.len() == b.len(), || {
            format!("{}: {} vs {} detections", scan.scan_id, a.len(), b.len())
        })?;
        for (x, y) in a.iter().zip(&b) {
            max_diff = max_diff.max((x.score - y.score).abs());
            check(x.mask == y.mask, || {
                format!("{}: masks differ", scan.scan_id)
            })?;
        }
        total += a.len();
    }
    check(max_diff <= 1e-5, || {
        format!("score difference {max_diff:e}")
    })?;
    Ok(format!(
        "5 tumor scans, {total} detections, max score difference {max_diff:e}, masks identical"
    ))
}

fn bookkeeping(run: &TrainedRun) -> Outcome {
    let ckpts = list_checkpoints(&run.run_dir).map_err(|e| e.to_string())?;
    let epochs: Vec<usize> = ckpts.iter().map(|c| c.0).collect();
    check(epochs == (1..=20).collect::<Vec<_>>(), || {
        format!("checkpoints {epochs:?}")
    })?;
    let history =
        TrainingHistory::read_csv(&run.run_dir.join(HISTORY_FILE)).map_err(|e| e.to_string())?;
    let idx: Vec<usize> = history.records().iter().map(|r| r.epoch_index).collect();
    check(idx == (1..=20).collect::<Vec<_>>(), || {
        format!("history epochs {idx:?}")
    })?;
    Ok("20 checkpoints, 20 history rows".into())
}

struct Server {
    _dir: TempDir,
    base: String,
    client: reqwest::Client,
    token: String,
    service: Option<Service>,
}

async fn start_server(run_dir: &Path) -> Result<Server, String> {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let config = ServiceConfig {
        storage_root: dir.path().join("storage"),
        database_path: dir.path().join("storage/tumorseg.db"),
        run_dir: run_dir.to_path_buf(),
        token_secret: "acceptance".into(),
        ..ServiceConfig::default()
    };
    let model = load_run(run_dir).map_err(|e| e.to_string())?;
    let service = Service::start(config, Box::new(model), Arc::new(SystemClock))
        .map_err(|e| e.to_string())?;
    service
        .add_user(USER, PASSWORD)
        .map_err(|e| e.to_string())?;
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0")
        .await
        .map_err(|e| e.to_string())?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    let app = service.router();
    tokio::spawn(async move { axum::serve(listener, app).await });
    let base = format!("http://{addr}");
    let client = reqwest::Client::new();
    let res = client
        .post(format!("{base}/api/login"))
        .json(&serde_json::json!({"username": USER, "password": PASSWORD}))
        .send()
        .await
        .map_err(|e| e.to_string())?;
    check(res.status() == 200, || {
        format!("login returned {}", res.status())
    })?;
    let body: Value = res.json().await.map_err(|e| e.to_string())?;
    let token = body["token"]
        .as_str()
        .ok_or("login returned no token")?
        .to_string();
    Ok(Server {
        _dir: dir,
        base,
        client,
        token,
        service: Some(service),
    })
}

impl Server {
    async fn upload(&self, patient: &str, png: Vec<u8>) -> Result<String, String> {
        let part = reqwest::multipart::Part::bytes(png)
            .file_name("scan.png")
            .mime_str("image/png")
            .map_err(|e| e.to_string())?;
        let form = reqwest::multipart::Form::new()
            .part("file", part)
            .text("patient_id", patient.to_string());
        let res = self
            .client
            .post(format!("{}/api/scans", self.base))
            .bearer_auth(&self.token)
            .multipart(form)
            .send()
            .await
            .map_err(|e| e.to_string())?;
        check(res.status() == 202, || {
            format!("upload returned {}", res.status())
        })?;
        let v: Value = res.json().await.map_err(|e| e.to_string())?;
        Ok(v["upload_id"].as_str().ok_or("no upload_id")?.to_string())
    }

    async fn get(&self, path: &str) -> Result<reqwest::Response, String> {
        self.client
            .get(format!("{}{path}", self.base))
            .bearer_auth(&self.token)
            .send()
            .await
            .map_err(|e| e.to_string())
    }

    async fn poll(&self, id: &str) -> Result<Value, String> {
        let deadline = Instant::now() + Duration::from_secs(120);
        loop {
            let res = self.get(&format!("/api/scans/{id}/result")).await?;
            let status = res.status();
            let v: Value = res.json().await.map_err(|e| e.to_string())?;
            match status.as_u16() {
                200 => return Ok(v),
                202 if Instant::now() < deadline => {
                    tokio::time::sleep(Duration::from_millis(50)).await
                }
                _ => return Err(format!("result for {id}: {status} {v}")),
            }
        }
    }

    fn stop(mut self) {
        if let Some(s) = self.service.take() {
            s.shutdown();
        }
    }
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .unwrap()
}

fn tumor_scan(run: &TrainedRun) -> &Image {
    run.dataset
        .iter()
        .find(|s| s.label() == Some(Label::Tumor))
        .expect("synthetic set has tumor scans")
        .image()
}

fn service_round_trip(run: &TrainedRun) -> Outcome {
    runtime().block_on(async {
        let server = start_server(&run.run_dir).await?;
        let image = tumor_scan(run);
        let id = server.upload("P-17", image.encode_png().map_err(|e| e.to_string())?).await?;
        let v = server.poll(&id).await?;
        check(v["patient_id"] == "P-17", || format!("patient_id {}", v["patient_id"]))?;
        let label = v["label"].as_str().ok_or("no label")?.to_string();
        let confidence = v["confidence"].as_f64().ok_or("no confidence")?;
        check((0.0..=1.0).contains(&confidence), || format!("confidence {confidence}"))?;
        let overlay_url = v["overlay_url"].as_str().ok_or("no overlay_url")?;
        let res = server.get(overlay_url).await?;
        check(res.status() == 200, || format!("overlay returned {}", res.status()))?;
        let bytes = res.bytes().await.map_err(|e| e.to_string())?;
        let overlay = Image::decode(&bytes).map_err(|e| e.to_string())?;
        check((overlay.height(), overlay.width()) == (image.height(), image.width()), || {
            "overlay size differs from the scan".into()
        })?;
        let history: Value = server.get("/api/patients/P-17/results").await?.json().await.map_err(|e| e.to_string())?;
        check(history.as_array().map(Vec::len) == Some(1), || format!("patient history {history}"))?;
        server.stop();
        Ok(format!("label {label}, confidence {confidence:.4}, overlay {overlay_url} resolves, patient_id P-17"))
    })
}

fn concurrency(run: &TrainedRun) -> Outcome {
    let scans =
        generate_synthetic_dataset(16, 99, &SynthParams::default()).map_err(|e| e.to_string())?;
    let threshold = ServiceConfig::default().detection_threshold;
    let model = load_run(&run.run_dir).map_err(|e| e.to_string())?;
    let mut expected = Vec::new();
    for (i, scan) in scans.iter().enumerate() {
        let dets = model.predict(scan.image()).map_err(|e| e.to_string())?;
        let d = diagnose(&dets, threshold);
        expected.push((
            format!("C-{i:02}"),
            scan.image().encode_png().map_err(|e| e.to_string())?,
            d,
        ));
    }
    runtime().block_on(async {
        let server = Arc::new(start_server(&run.run_dir).await?);
        let mut tasks = Vec::new();
        for (pid, png, _) in &expected {
            let (s, pid, png) = (server.clone(), pid.clone(), png.clone());
            tasks.push(tokio::spawn(async move {
                s.upload(&pid, png).await.map(|id| (pid, id))
            }));
        }
        let mut ids = BTreeMap::new();
        for t in tasks {
            let (pid, id) = t.await.map_err(|e| e.to_string())??;
            ids.insert(id, pid);
        }
        check(ids.len() == 16, || {
            format!("{} distinct upload ids", ids.len())
        })?;
        let mut results = BTreeSet::new();
        let mut tumors = 0;
        for (id, pid) in &ids {
            let v = server.poll(id).await?;
            check(v["patient_id"] == pid.as_str(), || {
                format!("{id}: patient {} != {pid}", v["patient_id"])
            })?;
            let (_, _, want) = expected.iter().find(|e| &e.0 == pid).unwrap();
            let conf = v["confidence"].as_f64().unwrap_or(f64::NAN);
            check(
                v["label"] == want.label.to_string() && (conf - want.confidence).abs() < 1e-9,
                || {
                    format!(
                        "{pid}: got {} {conf}, offline {} {}",
                        v["label"], want.label, want.confidence
                    )
                },
            )?;
            if want.label == Label::Tumor {
                tumors += 1;
            }
            results.insert(v["overlay_ref"].as_str().unwrap_or_default().to_string());
            let list: Value = server
                .get(&format!("/api/patients/{pid}/results"))
                .await?
                .json()
                .await
                .map_err(|e| e.to_string())?;
            check(list.as_array().map(Vec::len) == Some(1), || {
                format!("{pid}: history {list}")
            })?;
        }
        check(results.len() == 16, || {
            format!("{} distinct results", results.len())
        })?;
        if let Ok(s) = Arc::try_unwrap(server) {
            s.stop();
        }
        Ok(format!(
            "16 uploads, 16 distinct results, patient ids and predictions paired ({tumors} tumor)"
        ))
    })
}

fn reference_scale(root: &Path) -> Outcome {
    let dataset = load_dataset(root, Layout::detect(root)).map_err(|e| e.to_string())?;
    let split = split_dataset(&dataset, SplitRatios::default(), 42).map_err(|e| e.to_string())?;
    let sub = |ids: &[String]| dataset.subset(ids).map_err(|e| e.to_string());
    let (train_set, _) = strip_patient_ids(sub(&split.train)?);
    let (val_set, _) = strip_patient_ids(sub(&split.validation)?);
    let test_set = sub(&split.test)?;
    let config = ModelConfig::default();
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let weights = dir.path().join("pretrained.weights");
    let (bb, _, _) = pretrain_backbone(&config.backbone_id, &PretrainOptions::default())
        .map_err(|e| e.to_string())?;
    save_backbone(&bb, &weights).map_err(|e| e.to_string())?;
    let mut model = build_model(&config, &weights, true).map_err(|e| e.to_string())?;
    train(
        &mut model,
        &train_set,
        &val_set,
        &config,
        &dir.path().join("run"),
    )
    .map_err(|e| e.to_string())?;
    model.set_mode(Mode::Inference);
    let r = evaluate(&model, &test_set, &EvalConfig::from(&config)).map_err(|e| e.to_string())?;
    check(r.mean_iou.is_finite() && r.ap.is_finite(), || {
        "non-finite metrics".into()
    })?;
    Ok(format!(
        "{} scans ({} test): mean IoU {:.4} (reference 0.90), AP@0.5 {:.4} (reference 0.60); reported only",
        dataset.len(),
        test_set.len(),
        r.mean_iou,
        r.ap
    ))
}

fn main() {
    let mut suite = Suite { failed: 0 };
    suite.record("metric oracle equivalence", metric_oracles);
    suite.record("worked values", worked_values);

    let start = Instant::now();
    let run = catch_unwind(train_synthetic);
    match &run {
        Ok(_) => println!(
            "info  trained 40 scans x 20 epochs in {:.1}s",
            start.elapsed().as_secs_f64()
        ),
        Err(_) => println!("info  synthetic training failed"),
    }
    let trained = |f: fn(&TrainedRun) -> Outcome| {
        let run = run.as_ref().ok();
        move || run.map_or_else(|| Err("synthetic training failed".into()), f)
    };
    suite.record("synthetic overfit", trained(overfit));
    suite.record("reload fidelity", trained(reload_fidelity));
    suite.record("training bookkeeping", trained(bookkeeping));
    suite.record("service round trip", trained(service_round_trip));
    suite.record("concurrency safety", trained(concurrency));

    match std::env::var_os("TUMORSEG_REFERENCE_DATA") {
        Some(root) => suite.record("reference-scale check", || reference_scale(Path::new(&root))),
        None => println!(
            "SKIP  reference-scale check: set TUMORSEG_REFERENCE_DATA to a masked dataset to run it"
        ),
    }

    if suite.failed > 0 {
        println!("{} criterion/criteria failed", suite.failed);
        std::process::exit(1);
    }
}
